//! Frozen segmentation backend producing multi-class and foreground/
//! background score maps, plus the on-disk cache for real-image maps.
//!
//! Two backends share one interface:
//! * the stub, a per-pixel classifier whose logits are the negative scaled
//!   squared distance of the pixel colour to each class prototype colour
//!   (a 1×1 convolution followed by a channel softmax), and
//! * a pretrained convolutional segmenter loaded from a weight file.
//!
//! The backend's parameters are only ever bound as [`Binding::Frozen`], so
//! gradients flow through it to the generator but never into it.

mod cache;

use std::collections::BTreeSet;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

pub use cache::{image_key, CacheStats, SegCache, SEGMAP_MAGIC};

use crate::archive::{ArchiveReader, ArchiveWriter};
use crate::autodiff::{Binding, Graph, Var};
use crate::domain::{Domain, ImageBatch, SegKind, SegmentationMap};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvStack, Module, Param};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// One class of the built-in label space.
#[derive(Clone, Copy, Debug)]
pub struct ClassDef {
    pub name: &'static str,
    pub rgb: [u8; 3],
    /// Thing (countable foreground) vs stuff (amorphous background).
    pub thing: bool,
}

/// Label space of the stub backend and the synthetic scene generator.
pub const PALETTE: [ClassDef; 8] = [
    ClassDef { name: "sky", rgb: [120, 180, 240], thing: false },
    ClassDef { name: "grass", rgb: [60, 150, 50], thing: false },
    ClassDef { name: "sand", rgb: [220, 195, 130], thing: false },
    ClassDef { name: "wall", rgb: [140, 120, 110], thing: false },
    ClassDef { name: "person", rgb: [210, 40, 40], thing: true },
    ClassDef { name: "elephant", rgb: [70, 70, 90], thing: true },
    ClassDef { name: "sheep", rgb: [245, 245, 235], thing: true },
    ClassDef { name: "car", rgb: [240, 200, 20], thing: true },
];

/// Softmax sharpness of the stub, in units of squared [-1, 1] colour
/// distance.
pub const STUB_SHARPNESS: f64 = 12.0;

pub const WEIGHTS_MAGIC: [u8; 8] = *b"ASLSEGW\0";

pub fn palette_foreground() -> BTreeSet<usize> {
    PALETTE.iter().enumerate().filter(|(_, c)| c.thing).map(|(i, _)| i).collect()
}

/// Palette colour mapped into `[-1, 1]`.
pub fn palette_color(class: usize) -> [f64; 3] {
    PALETTE[class].rgb.map(|v| v as f64 / 127.5 - 1.0)
}

enum Net<T> {
    /// Single 1×1 convolution producing logits.
    Linear(Conv2d<T>),
    Stack(ConvStack<T>),
}

/// Multi-class or binary map living on a graph.
#[derive(Clone, Copy)]
pub struct SegMapVar<'g, T: Scalar> {
    pub scores: Var<'g, T>,
    pub kind: SegKind,
}

impl<'g, T: Scalar> SegMapVar<'g, T> {
    pub fn constant(g: &'g Graph<T>, map: &SegmentationMap<T>) -> Self {
        Self { scores: g.input(map.scores().clone()), kind: map.kind() }
    }

    pub fn to_map(&self) -> Result<SegmentationMap<T>> {
        SegmentationMap::new(self.scores.value().clone(), self.kind)
    }
}

#[derive(Serialize, Deserialize)]
struct WeightMeta {
    class_count: usize,
    foreground_ids: Vec<usize>,
    size_multiple: usize,
    layers: usize,
}

/// Frozen segmentation network.
pub struct SegBackend<T> {
    net: Net<T>,
    class_count: usize,
    foreground: BTreeSet<usize>,
    /// Soft scores keep the map differentiable; hard maps are one-hot.
    pub soft_output: bool,
    size_multiple: usize,
    forwarded: AtomicUsize,
}

impl<T: Scalar> SegBackend<T> {
    /// Colour-prototype classifier over [`PALETTE`].
    pub fn stub() -> Self {
        let k = PALETTE.len();
        let beta = STUB_SHARPNESS;
        // -β‖c - p‖² = 2β p·c - β‖p‖² - β‖c‖²; the last term is shared by all
        // classes and cancels in the softmax.
        let mut w = Vec::with_capacity(k * 3);
        let mut b = Vec::with_capacity(k);
        for class in 0..k {
            let p = palette_color(class);
            w.extend(p.iter().map(|v| T::lit(2.0 * beta * v)));
            b.push(T::lit(-beta * p.iter().map(|v| v * v).sum::<f64>()));
        }
        Self::linear(
            Tensor::from_vec([k, 3, 1, 1], w).unwrap(),
            Tensor::from_vec([k], b).unwrap(),
            palette_foreground(),
        )
        .expect("palette has both things and stuff")
    }

    /// Backend whose logits are the same constant for every class.
    pub fn constant(class_count: usize, foreground: BTreeSet<usize>) -> Result<Self> {
        Self::linear(Tensor::zeros([class_count, 3, 1, 1]), Tensor::zeros([class_count]), foreground)
    }

    fn linear(weight: Tensor<T>, bias: Tensor<T>, foreground: BTreeSet<usize>) -> Result<Self> {
        let class_count = weight.shape()[0];
        check_foreground(&foreground, class_count)?;
        Ok(Self {
            net: Net::Linear(Conv2d {
                weight: Param::new("seg.weight", weight),
                bias: Some(Param::new("seg.bias", bias)),
                stride: 1,
                pad: 0,
            }),
            class_count,
            foreground,
            soft_output: true,
            size_multiple: 1,
            forwarded: AtomicUsize::new(0),
        })
    }

    /// Loads a pretrained segmenter weight file.
    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::BackendNotLoaded(format!("no weight file at {}", path.display())));
        }
        let r = ArchiveReader::open(path, WEIGHTS_MAGIC)?;
        let meta: WeightMeta = r.meta()?;
        let stack = ConvStack::from_archive(&r, meta.layers)?;
        if stack.in_channels() != 3 || stack.out_channels() != meta.class_count {
            return Err(Error::Checkpoint("segmenter must map 3 channels to class_count".into()));
        }
        let foreground: BTreeSet<usize> = meta.foreground_ids.into_iter().collect();
        check_foreground(&foreground, meta.class_count)?;
        Ok(Self {
            net: Net::Stack(stack),
            class_count: meta.class_count,
            foreground,
            soft_output: true,
            size_multiple: meta.size_multiple.max(1),
            forwarded: AtomicUsize::new(0),
        })
    }

    /// Writes a pretrained-format weight file for `stack`.
    pub fn save_weights(
        path: &Path,
        stack: &ConvStack<T>,
        foreground: &BTreeSet<usize>,
        size_multiple: usize,
    ) -> Result<()> {
        let meta = WeightMeta {
            class_count: stack.out_channels(),
            foreground_ids: foreground.iter().copied().collect(),
            size_multiple,
            layers: stack.layers.len(),
        };
        let mut w = ArchiveWriter::new::<T>(WEIGHTS_MAGIC, &meta)?;
        stack.write_into(&mut w);
        w.write_atomic(path)
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn foreground(&self) -> &BTreeSet<usize> {
        &self.foreground
    }

    /// Number of images pushed through the network so far.
    pub fn forward_count(&self) -> usize {
        self.forwarded.load(Ordering::Relaxed)
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        match &self.net {
            Net::Linear(c) => c.params(),
            Net::Stack(s) => s.params(),
        }
    }

    /// Checksum of the frozen parameters.
    pub fn checksum(&self) -> String {
        crate::tensor::checksum_all(self.params().into_iter().map(|p| p.value()))
    }

    /// Multi-class scores of colour images on `g`. Gradients reach `images`
    /// when `soft_output` is set.
    pub fn segment_multiclass<'g>(&self, g: &'g Graph<T>, images: Var<'g, T>) -> Result<SegMapVar<'g, T>> {
        let (n, c, h, w) = images.value().dims4()?;
        if c != 3 {
            return Err(Error::ChannelMismatch { expected: 3, got: c });
        }
        if h % self.size_multiple != 0 || w % self.size_multiple != 0 {
            return Err(Error::ResolutionMismatch { got: h, multiple: self.size_multiple });
        }
        self.forwarded.fetch_add(n, Ordering::Relaxed);
        let logits = match &self.net {
            Net::Linear(conv) => conv.forward(g, images, Binding::Frozen)?,
            Net::Stack(stack) => stack.forward(g, images, Binding::Frozen)?,
        };
        let soft = logits.softmax_channels()?;
        let scores = if self.soft_output {
            soft
        } else {
            let hard = one_hot(&soft.value());
            g.input(hard)
        };
        Ok(SegMapVar { scores, kind: SegKind::Multiclass })
    }

    /// Value-level wrapper of [`Self::segment_multiclass`].
    pub fn segment(&self, batch: &ImageBatch<T>) -> Result<SegmentationMap<T>> {
        if batch.domain() != Domain::Color {
            return Err(Error::ChannelMismatch { expected: 3, got: batch.channels() });
        }
        let g = Graph::new();
        let m = self.segment_multiclass(&g, g.input(batch.tensor().clone()))?;
        m.to_map()
    }

    /// Groups multi-class scores into background (channel 0) and
    /// foreground (channel 1).
    pub fn collapse<'g>(&self, map: SegMapVar<'g, T>) -> Result<SegMapVar<'g, T>> {
        collapse_to_binary(map, &self.foreground)
    }
}

fn check_foreground(fg: &BTreeSet<usize>, class_count: usize) -> Result<()> {
    if fg.is_empty() || fg.len() >= class_count || fg.iter().any(|&c| c >= class_count) {
        return Err(Error::EmptyForegroundSet);
    }
    Ok(())
}

fn one_hot<T: Scalar>(scores: &Tensor<T>) -> Tensor<T> {
    let labels = crate::domain::argmax_channels(scores);
    let s = scores.shape();
    let (k, hw) = (s[1], s[2] * s[3]);
    let mut out = Tensor::zeros(s.to_vec());
    for (i, &l) in labels.iter().enumerate() {
        let (b, p) = (i / hw, i % hw);
        out.data_mut()[(b * k + l as usize) * hw + p] = T::one();
    }
    out
}

/// Foreground channel is the sum of scores over `foreground`, background
/// the sum over the complement.
pub fn collapse_to_binary<'g, T: Scalar>(
    map: SegMapVar<'g, T>,
    foreground: &BTreeSet<usize>,
) -> Result<SegMapVar<'g, T>> {
    if map.kind != SegKind::Multiclass {
        return Err(Error::KindMismatch("collapse expects a multi-class map".into()));
    }
    let k = map.scores.value().shape()[1];
    if foreground.is_empty() {
        return Err(Error::EmptyForegroundSet);
    }
    if let Some(&bad) = foreground.iter().find(|&&c| c >= k) {
        return Err(Error::Shape(format!("foreground class {bad} out of {k}")));
    }
    let background: Vec<usize> = (0..k).filter(|c| !foreground.contains(c)).collect();
    let scores = map.scores.group_sum_channels(vec![background, foreground.iter().copied().collect()])?;
    Ok(SegMapVar { scores, kind: SegKind::Binary })
}

/// Value-level collapse.
pub fn collapse_map<T: Scalar>(map: &SegmentationMap<T>, foreground: &BTreeSet<usize>) -> Result<SegmentationMap<T>> {
    let g = Graph::new();
    collapse_to_binary(SegMapVar::constant(&g, map), foreground)?.to_map()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gray(n: usize, size: usize) -> ImageBatch<f64> {
        ImageBatch::new(Tensor::zeros([n, 3, size, size]), Domain::Color).unwrap()
    }

    #[test]
    fn constant_logits_give_uniform_scores() {
        let fg: BTreeSet<usize> = [1, 2].into();
        let backend = SegBackend::<f64>::constant(5, fg).unwrap();
        let map = backend.segment(&gray(2, 4)).unwrap();
        assert!(map.scores().data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
        let binary = collapse_map(&map, backend.foreground()).unwrap();
        // FG = f/K everywhere
        let hw = 16;
        for b in 0..2 {
            for p in 0..hw {
                assert!((binary.scores().data()[(b * 2 + 1) * hw + p] - 0.4).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn scores_normalized_for_random_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = Tensor::<f32>::uniform([3, 3, 8, 8], -1.0, 1.0, &mut rng);
        let map = SegBackend::<f32>::stub().segment(&ImageBatch::new(t, Domain::Color).unwrap()).unwrap();
        assert!(map.normalization_error().is_none());
    }

    #[test]
    fn stub_recovers_two_region_mask() {
        // left half "sky", right half "person", with mild noise
        let size = 16;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut t = Tensor::<f64>::zeros([1, 3, size, size]);
        let mut mask = vec![0u16; size * size];
        for i in 0..size {
            for j in 0..size {
                let class = if j < size / 2 { 0 } else { 4 };
                mask[i * size + j] = class as u16;
                let c = palette_color(class);
                for (ch, cv) in c.iter().enumerate() {
                    let noisy = cv + rng.random_range(-0.05..0.05);
                    t.data_mut()[(ch * size + i) * size + j] = noisy.clamp(-1.0, 1.0);
                }
            }
        }
        let map = SegBackend::<f64>::stub().segment(&ImageBatch::new(t, Domain::Color).unwrap()).unwrap();
        let agree = map.argmax().iter().zip(&mask).filter(|(a, b)| a == b).count();
        assert!(agree as f64 >= 0.99 * mask.len() as f64);
    }

    #[test]
    fn one_hot_collapse() {
        // person at (0,0), grass at (0,1)
        let k = PALETTE.len();
        let mut t = Tensor::<f64>::zeros([1, k, 1, 2]);
        t.data_mut()[4 * 2] = 1.0;
        t.data_mut()[2 + 1] = 1.0;
        let map = SegmentationMap::new(t, SegKind::Multiclass).unwrap();
        let b = collapse_map(&map, &palette_foreground()).unwrap();
        assert_eq!(b.scores().data(), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn collapse_rejects_empty_foreground_and_binary_input() {
        let map = SegmentationMap::new(Tensor::<f64>::full([1, 4, 1, 1], 0.25), SegKind::Multiclass).unwrap();
        assert!(matches!(collapse_map(&map, &BTreeSet::new()), Err(Error::EmptyForegroundSet)));
        let bin = SegmentationMap::new(Tensor::<f64>::full([1, 2, 1, 1], 0.5), SegKind::Binary).unwrap();
        assert!(matches!(collapse_map(&bin, &[1].into()), Err(Error::KindMismatch(_))));
        assert!(SegBackend::<f64>::constant(3, [0, 1, 2].into()).is_err());
    }

    #[test]
    fn collapse_matches_brute_force_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (k, h, w) = (10, 3, 4);
        let logits = Tensor::<f64>::randn([2, k, h, w], 2.0, &mut rng);
        let g = Graph::new();
        let soft = g.input(logits).softmax_channels().unwrap().value().clone();
        let map = SegmentationMap::new(soft.clone(), SegKind::Multiclass).unwrap();
        let fg: BTreeSet<usize> = [1, 3, 4, 8].into();
        let b = collapse_map(&map, &fg).unwrap();
        let hw = h * w;
        for n in 0..2 {
            for p in 0..hw {
                let mut fg_sum = 0.0;
                let mut bg_sum = 0.0;
                for c in 0..k {
                    let v = soft.data()[(n * k + c) * hw + p];
                    if fg.contains(&c) {
                        fg_sum += v;
                    } else {
                        bg_sum += v;
                    }
                }
                assert!((b.scores().data()[(n * 2) * hw + p] - bg_sum).abs() < 1e-15);
                assert!((b.scores().data()[(n * 2 + 1) * hw + p] - fg_sum).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn gradient_reaches_input_but_not_backend() {
        let backend = SegBackend::<f64>::stub();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = Graph::new();
        let x = g.leaf(Tensor::uniform([1, 3, 4, 4], -1.0, 1.0, &mut rng));
        let m = backend.segment_multiclass(&g, x).unwrap();
        let b = backend.collapse(m).unwrap();
        let loss = b.scores.bce_with_logits(1.0);
        let grads = g.backward(loss).unwrap();
        assert!(grads.wrt(x).unwrap().data().iter().any(|v| *v != 0.0));
        assert_eq!(grads.abs_sum(backend.params()), 0.0);
    }

    #[test]
    fn detached_copy_gives_identical_scores() {
        let backend = SegBackend::<f32>::stub();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let t = Tensor::<f32>::uniform([2, 3, 4, 4], -1.0, 1.0, &mut rng);
        let g = Graph::new();
        let x = g.leaf(t);
        let a = backend.segment_multiclass(&g, x).unwrap().scores.value().clone();
        let b = backend.segment_multiclass(&g, x.detach()).unwrap().scores.value().clone();
        assert_eq!(a, b);
        assert_eq!(backend.forward_count(), 4);
    }

    #[test]
    fn hard_output_is_one_hot() {
        let mut backend = SegBackend::<f64>::stub();
        backend.soft_output = false;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = Tensor::<f64>::uniform([1, 3, 3, 3], -1.0, 1.0, &mut rng);
        let map = backend.segment(&ImageBatch::new(t, Domain::Color).unwrap()).unwrap();
        assert!(map.scores().data().iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn pretrained_round_trip_and_missing_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("seg.bin");
        assert!(matches!(SegBackend::<f32>::load(&path), Err(Error::BackendNotLoaded(_))));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let stack = ConvStack {
            layers: vec![
                Conv2d::<f32>::new("a", 3, 4, 3, 1, 1, 0.5, &mut rng),
                Conv2d::<f32>::new("b", 4, 6, 1, 1, 0, 0.5, &mut rng),
            ],
        };
        SegBackend::save_weights(&path, &stack, &[4, 5].into(), 8).unwrap();
        let backend = SegBackend::<f32>::load(&path).unwrap();
        assert_eq!(backend.class_count(), 6);
        let ok = ImageBatch::new(Tensor::<f32>::zeros([1, 3, 8, 8]), Domain::Color).unwrap();
        assert!(backend.segment(&ok).unwrap().normalization_error().is_none());
        let bad = ImageBatch::new(Tensor::<f32>::zeros([1, 3, 12, 12]), Domain::Color).unwrap();
        assert!(matches!(backend.segment(&bad), Err(Error::ResolutionMismatch { .. })));
    }

    proptest! {
        #[test]
        fn collapse_preserves_mass_and_argmax_group(
            logits in proptest::collection::vec(-6.0f64..6.0, 8 * 9),
            fg_mask in proptest::collection::vec(any::<bool>(), 8),
        ) {
            let fg: BTreeSet<usize> = fg_mask.iter().enumerate().filter(|(_, b)| **b).map(|(i, _)| i).collect();
            prop_assume!(!fg.is_empty() && fg.len() < 8);
            let g = Graph::new();
            let soft = g.input(Tensor::from_vec([1, 8, 3, 3], logits).unwrap()).softmax_channels().unwrap();
            let multi = SegMapVar { scores: soft, kind: SegKind::Multiclass };
            let bin = collapse_to_binary(multi, &fg).unwrap();
            let m = soft.value().clone();
            let b = bin.scores.value().clone();
            for p in 0..9 {
                let total: f64 = (0..8).map(|c| m.data()[c * 9 + p]).sum();
                prop_assert!((b.data()[p] + b.data()[9 + p] - total).abs() < 1e-6);
            }
            let m_arg = crate::domain::argmax_channels(&m);
            let b_arg = crate::domain::argmax_channels(&b);
            for p in 0..9 {
                let fg_argmax = fg.contains(&(m_arg[p] as usize));
                let fg_mass = b.data()[9 + p];
                // argmax membership implies the group's mass majority only
                // when the winner dominates; check the implication that is
                // exact: a class holding > 1/2 decides both argmaxes.
                let top = (0..8).map(|c| m.data()[c * 9 + p]).fold(0.0, f64::max);
                if top > 0.5 {
                    prop_assert_eq!(fg_argmax, b_arg[p] == 1);
                }
                prop_assert!((0.0..=1.0 + 1e-12).contains(&fg_mass));
            }
        }
    }
}
