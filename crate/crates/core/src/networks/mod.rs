//! Generators and discriminators.

mod checkpoint;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{read_module, write_module, Role, CHECKPOINT_MAGIC};

use crate::autodiff::{Binding, Graph, Var};
use crate::config::GeneratorArch;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Module, Param};
use crate::scalar::Scalar;
use crate::segbackend::SegMapVar;
use crate::domain::SegKind;

/// Standard deviation of the normal weight initialization.
pub const INIT_STD: f64 = 0.02;
const NORM_EPS: f64 = 1e-5;
const LEAK: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub arch: GeneratorArch,
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_width: usize,
    /// Residual blocks (resnet) or encoder depth (unet).
    pub n_blocks: usize,
    /// Stride-2 stages of the resnet generator; ignored by the unet.
    pub downsamplings: usize,
}

impl GeneratorSpec {
    /// Input sizes must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        match self.arch {
            GeneratorArch::Resnet => 1 << self.downsamplings,
            GeneratorArch::Unet => 1 << self.n_blocks,
        }
    }

    pub fn check_resolution(&self, resolution: usize) -> Result<()> {
        if resolution == 0 || !resolution.is_multiple_of(self.size_multiple()) {
            return Err(Error::UnsupportedArch(format!(
                "{:?} generator needs sizes divisible by {}, got {resolution}",
                self.arch,
                self.size_multiple()
            )));
        }
        Ok(())
    }
}

#[allow(clippy::large_enum_variant)]
enum Body<T> {
    Resnet {
        stem: Conv2d<T>,
        down: Vec<Conv2d<T>>,
        blocks: Vec<[Conv2d<T>; 2]>,
        up: Vec<Conv2d<T>>,
        head: Conv2d<T>,
    },
    Unet {
        enc: Vec<Conv2d<T>>,
        dec: Vec<Conv2d<T>>,
    },
}

/// Image-to-image generator with a `tanh` output in `[-1, 1]`.
pub struct Generator<T> {
    spec: GeneratorSpec,
    body: Body<T>,
}

pub fn build_generator<T: Scalar, R: Rng + ?Sized>(spec: &GeneratorSpec, rng: &mut R) -> Result<Generator<T>> {
    if spec.in_channels == 0 || spec.out_channels == 0 || spec.base_width == 0 {
        return Err(Error::UnsupportedArch("channel counts must be positive".into()));
    }
    let conv = |name: String, cin, cout, k, s, p, rng: &mut R| Conv2d::new(&name, cin, cout, k, s, p, INIT_STD, rng);
    // Layers feeding an instance norm carry no bias: the norm would cancel it.
    let normed = |name: String, cin, cout, k, s, p, rng: &mut R| conv(name, cin, cout, k, s, p, rng).without_bias();
    let w = spec.base_width;
    let body = match spec.arch {
        GeneratorArch::Resnet => {
            if spec.downsamplings > 6 {
                return Err(Error::UnsupportedArch("at most 6 downsamplings".into()));
            }
            let stem = normed("stem".into(), spec.in_channels, w, 3, 1, 1, rng);
            let mut down = Vec::new();
            for i in 0..spec.downsamplings {
                down.push(normed(format!("down{i}"), w << i, w << (i + 1), 3, 2, 1, rng));
            }
            let c = w << spec.downsamplings;
            let mut blocks = Vec::new();
            for i in 0..spec.n_blocks {
                blocks.push([
                    normed(format!("block{i}.a"), c, c, 3, 1, 1, rng),
                    normed(format!("block{i}.b"), c, c, 3, 1, 1, rng),
                ]);
            }
            let mut up = Vec::new();
            for i in (0..spec.downsamplings).rev() {
                up.push(normed(format!("up{i}"), w << (i + 1), w << i, 3, 1, 1, rng));
            }
            let head = conv("head".into(), w, spec.out_channels, 3, 1, 1, rng);
            Body::Resnet { stem, down, blocks, up, head }
        }
        GeneratorArch::Unet => {
            let d = spec.n_blocks;
            if d == 0 || d > 8 {
                return Err(Error::UnsupportedArch(format!("unet depth must be in 1..=8, got {d}")));
            }
            let ch = |i: usize| w << i.min(3);
            let mut enc = Vec::new();
            for i in 0..d {
                let cin = if i == 0 { spec.in_channels } else { ch(i - 1) };
                let layer = conv(format!("enc{i}"), cin, ch(i), 4, 2, 1, rng);
                enc.push(if i > 0 && i + 1 < d { layer.without_bias() } else { layer });
            }
            let mut dec = Vec::new();
            for i in 0..d {
                let cin = if i == d - 1 { ch(d - 1) } else { 2 * ch(i) };
                let cout = if i == 0 { spec.out_channels } else { ch(i - 1) };
                let layer = conv(format!("dec{i}"), cin, cout, 3, 1, 1, rng);
                dec.push(if i > 0 { layer.without_bias() } else { layer });
            }
            Body::Unet { enc, dec }
        }
    };
    Ok(Generator { spec: spec.clone(), body })
}

impl<T: Scalar> Generator<T> {
    pub fn spec(&self) -> &GeneratorSpec {
        &self.spec
    }

    pub fn forward<'g>(&self, g: &'g Graph<T>, x: Var<'g, T>, binding: Binding) -> Result<Var<'g, T>> {
        let (_, c, h, w) = x.value().dims4()?;
        if c != self.spec.in_channels {
            return Err(Error::ChannelMismatch { expected: self.spec.in_channels, got: c });
        }
        let m = self.spec.size_multiple();
        if h % m != 0 || w % m != 0 {
            return Err(Error::UnsupportedArch(format!("input {h}x{w} not divisible by {m}")));
        }
        let eps = T::lit(NORM_EPS);
        match &self.body {
            Body::Resnet { stem, down, blocks, up, head } => {
                let mut h = stem.forward(g, x, binding)?.instance_norm(eps)?.relu();
                for layer in down {
                    h = layer.forward(g, h, binding)?.instance_norm(eps)?.relu();
                }
                for [a, b] in blocks {
                    let r = a.forward(g, h, binding)?.instance_norm(eps)?.relu();
                    let r = b.forward(g, r, binding)?.instance_norm(eps)?;
                    h = h.add(r)?;
                }
                for layer in up {
                    h = layer.forward(g, h.upsample2x()?, binding)?.instance_norm(eps)?.relu();
                }
                Ok(head.forward(g, h, binding)?.tanh())
            }
            Body::Unet { enc, dec } => {
                let d = enc.len();
                let leak = T::lit(LEAK);
                let mut skips = Vec::with_capacity(d);
                let mut h = x;
                for (i, layer) in enc.iter().enumerate() {
                    h = layer.forward(g, h, binding)?;
                    // The first and innermost stages stay unnormalized; the
                    // innermost map can be 1×1.
                    if i > 0 && i + 1 < d {
                        h = h.instance_norm(eps)?;
                    }
                    h = h.leaky_relu(leak);
                    skips.push(h);
                }
                for i in (0..d).rev() {
                    h = dec[i].forward(g, h.upsample2x()?, binding)?;
                    if i == 0 {
                        h = h.tanh();
                    } else {
                        h = h.instance_norm(eps)?.relu();
                        h = g.concat_channels(&[h, skips[i - 1]])?;
                    }
                }
                Ok(h)
            }
        }
    }
}

impl<T: Scalar> Module<T> for Generator<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut out = Vec::new();
        match &self.body {
            Body::Resnet { stem, down, blocks, up, head } => {
                out.extend(stem.params());
                down.iter().for_each(|l| out.extend(l.params()));
                blocks.iter().flatten().for_each(|l| out.extend(l.params()));
                up.iter().for_each(|l| out.extend(l.params()));
                out.extend(head.params());
            }
            Body::Unet { enc, dec } => {
                enc.iter().chain(dec).for_each(|l| out.extend(l.params()));
            }
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out = Vec::new();
        match &mut self.body {
            Body::Resnet { stem, down, blocks, up, head } => {
                out.extend(stem.params_mut());
                down.iter_mut().for_each(|l| out.extend(l.params_mut()));
                blocks.iter_mut().flatten().for_each(|l| out.extend(l.params_mut()));
                up.iter_mut().for_each(|l| out.extend(l.params_mut()));
                out.extend(head.params_mut());
            }
            Body::Unet { enc, dec } => {
                enc.iter_mut().chain(dec.iter_mut()).for_each(|l| out.extend(l.params_mut()));
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DiscKind {
    Image,
    SegBinary,
    SegMulticlass,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorSpec {
    pub kind: DiscKind,
    pub in_channels: usize,
    pub base_width: usize,
    /// Stride-2 stages.
    pub n_layers: usize,
    pub patch_output: bool,
}

impl DiscriminatorSpec {
    /// Side length of the patch map for a square input, if positive.
    pub fn output_size(&self, input: usize) -> Option<usize> {
        let mut s = input;
        for _ in 0..self.n_layers {
            s = crate::autodiff::conv_out_size(s, 4, 2, 1);
        }
        // Two 4×4 stride-1 stages, each shrinking by one.
        s.checked_sub(2).filter(|&s| s > 0)
    }
}

/// Patch discriminator emitting raw logits.
pub struct Discriminator<T> {
    spec: DiscriminatorSpec,
    layers: Vec<Conv2d<T>>,
}

pub fn build_discriminator<T: Scalar, R: Rng + ?Sized>(
    spec: &DiscriminatorSpec,
    rng: &mut R,
) -> Result<Discriminator<T>> {
    if spec.in_channels == 0 || spec.base_width == 0 {
        return Err(Error::UnsupportedArch("channel counts must be positive".into()));
    }
    if spec.kind == DiscKind::SegBinary && spec.in_channels != 2 {
        return Err(Error::ChannelMismatch { expected: 2, got: spec.in_channels });
    }
    let w = spec.base_width;
    let width = |i: usize| w << i.min(3);
    let mut layers = vec![Conv2d::new("in", spec.in_channels, w, 4, 2, 1, INIT_STD, rng)];
    for i in 1..spec.n_layers {
        layers.push(Conv2d::new(&format!("down{i}"), width(i - 1), width(i), 4, 2, 1, INIT_STD, rng));
    }
    let last = width(spec.n_layers.saturating_sub(1));
    let wide = width(spec.n_layers);
    layers.push(Conv2d::new("mid", last, wide, 4, 1, 1, INIT_STD, rng));
    layers.push(Conv2d::new("out", wide, 1, 4, 1, 1, INIT_STD, rng));
    if spec.n_layers == 0 {
        // Without a stride-2 stage the input layer is the only one feeding
        // `mid`, so `mid` must take its width.
        layers.remove(0);
        layers[0] = Conv2d::new("mid", spec.in_channels, wide, 4, 1, 1, INIT_STD, rng);
    }
    let n = layers.len();
    for (i, layer) in layers.iter_mut().enumerate() {
        if i + 1 < n && (i > 0 || spec.n_layers == 0) {
            layer.bias = None;
        }
    }
    Ok(Discriminator { spec: spec.clone(), layers })
}

impl<T: Scalar> Discriminator<T> {
    pub fn spec(&self) -> &DiscriminatorSpec {
        &self.spec
    }

    /// Logits, `N×1×h'×w'` (patch) or `N×1×1×1`.
    pub fn forward<'g>(&self, g: &'g Graph<T>, x: Var<'g, T>, binding: Binding) -> Result<Var<'g, T>> {
        let (_, c, h, _) = x.value().dims4()?;
        if c != self.spec.in_channels {
            return Err(Error::ChannelMismatch { expected: self.spec.in_channels, got: c });
        }
        if self.spec.output_size(h).is_none() {
            return Err(Error::UnsupportedArch(format!(
                "{h}px input is too small for {} stride-2 stages",
                self.spec.n_layers
            )));
        }
        let eps = T::lit(NORM_EPS);
        let leak = T::lit(LEAK);
        let n = self.layers.len();
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, h, binding)?;
            if i + 1 == n {
                break;
            }
            if i > 0 || self.spec.n_layers == 0 {
                h = h.instance_norm(eps)?;
            }
            h = h.leaky_relu(leak);
        }
        if self.spec.patch_output {
            Ok(h)
        } else {
            h.mean_hw()
        }
    }

    /// Scores a segmentation map after checking its kind.
    pub fn score_map<'g>(&self, g: &'g Graph<T>, map: SegMapVar<'g, T>, binding: Binding) -> Result<Var<'g, T>> {
        let want = match self.spec.kind {
            DiscKind::SegBinary => SegKind::Binary,
            DiscKind::SegMulticlass => SegKind::Multiclass,
            DiscKind::Image => return Err(Error::KindMismatch("image discriminator given a segmentation map".into())),
        };
        if map.kind != want {
            return Err(Error::KindMismatch(format!("{:?} discriminator given a {:?} map", self.spec.kind, map.kind)));
        }
        self.forward(g, map.scores, binding)
    }
}

impl<T: Scalar> Module<T> for Discriminator<T> {
    fn params(&self) -> Vec<&Param<T>> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }
}
