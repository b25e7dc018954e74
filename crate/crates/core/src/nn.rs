//! Parameters, layers and the Adam optimizer.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Binding, Graph, Gradients, Var};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::{checksum_all, Tensor};

static NEXT_PARAM: AtomicU64 = AtomicU64::new(1);

/// Process-unique identity of a parameter, used to key gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(u64);

/// A named learnable tensor.
#[derive(Debug)]
pub struct Param<T> {
    id: ParamId,
    name: String,
    value: Tensor<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        Self { id: ParamId(NEXT_PARAM.fetch_add(1, Ordering::Relaxed)), name: name.into(), value }
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn value_mut(&mut self) -> &mut Tensor<T> {
        &mut self.value
    }
}

// Clones get a fresh identity so two copies can live in one graph.
impl<T: Clone> Clone for Param<T> {
    fn clone(&self) -> Self {
        Self {
            id: ParamId(NEXT_PARAM.fetch_add(1, Ordering::Relaxed)),
            name: self.name.clone(),
            value: self.value.clone(),
        }
    }
}

/// Anything that owns parameters in a stable order.
pub trait Module<T: Scalar> {
    fn params(&self) -> Vec<&Param<T>>;
    fn params_mut(&mut self) -> Vec<&mut Param<T>>;

    fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.value().len()).sum()
    }

    fn checksum(&self) -> String {
        checksum_all(self.params().into_iter().map(|p| p.value()))
    }
}

/// Square-kernel convolution, optionally with bias.
#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Scalar> Conv2d<T> {
    /// `N(0, 0.02²)` weights and zero bias, the usual GAN initialization.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        init_std: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            weight: Param::new(format!("{name}.weight"), Tensor::randn([cout, cin, kernel, kernel], init_std, rng)),
            bias: Some(Param::new(format!("{name}.bias"), Tensor::zeros([cout]))),
            stride,
            pad,
        }
    }

    /// Drops the bias; used where a normalization would cancel it anyway.
    pub fn without_bias(mut self) -> Self {
        self.bias = None;
        self
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value().shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value().shape()[0]
    }

    pub fn forward<'g>(&self, g: &'g Graph<T>, x: Var<'g, T>, binding: Binding) -> Result<Var<'g, T>> {
        let bias = self.bias.as_ref().map(|b| g.bind(b, binding));
        x.conv2d(g.bind(&self.weight, binding), bias, self.stride, self.pad)
    }
}

impl<T: Scalar> Module<T> for Conv2d<T> {
    fn params(&self) -> Vec<&Param<T>> {
        std::iter::once(&self.weight).chain(self.bias.as_ref()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        std::iter::once(&mut self.weight).chain(self.bias.as_mut()).collect()
    }
}

/// Convolutions with ReLU between them and no activation after the last.
/// Backs externally supplied networks (pretrained segmenter, edge detector).
#[derive(Clone, Debug)]
pub struct ConvStack<T> {
    pub layers: Vec<Conv2d<T>>,
}

impl<T: Scalar> ConvStack<T> {
    pub fn forward<'g>(&self, g: &'g Graph<T>, mut x: Var<'g, T>, binding: Binding) -> Result<Var<'g, T>> {
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(g, x, binding)?;
            if i + 1 < self.layers.len() {
                x = x.relu();
            }
        }
        Ok(x)
    }

    pub fn in_channels(&self) -> usize {
        self.layers.first().map_or(0, |l| l.in_channels())
    }

    pub fn out_channels(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_channels())
    }

    /// Loads `layer{i}.weight` / `layer{i}.bias` with "same" padding.
    pub fn from_archive(r: &crate::archive::ArchiveReader, layers: usize) -> Result<Self> {
        let mut out = Vec::with_capacity(layers);
        for i in 0..layers {
            let weight = r.tensor::<T>(&format!("layer{i}.weight"))?;
            let bias = r.tensor::<T>(&format!("layer{i}.bias"))?;
            let (cout, _, k, _) = weight.dims4()?;
            if bias.shape() != [cout] || k % 2 == 0 {
                return Err(crate::error::Error::Checkpoint(format!("layer{i}: inconsistent shapes")));
            }
            out.push(Conv2d {
                weight: Param::new(format!("layer{i}.weight"), weight),
                bias: Some(Param::new(format!("layer{i}.bias"), bias)),
                stride: 1,
                pad: k / 2,
            });
        }
        if out.is_empty() {
            return Err(crate::error::Error::Checkpoint("weight file has no layers".into()));
        }
        for pair in out.windows(2) {
            if pair[0].out_channels() != pair[1].in_channels() {
                return Err(crate::error::Error::Checkpoint("layer channel counts do not chain".into()));
            }
        }
        Ok(Self { layers: out })
    }

    pub fn write_into(&self, w: &mut crate::archive::ArchiveWriter) {
        for (i, l) in self.layers.iter().enumerate() {
            w.tensor(format!("layer{i}.weight"), l.weight.value());
            match &l.bias {
                Some(b) => w.tensor(format!("layer{i}.bias"), b.value()),
                None => w.tensor(format!("layer{i}.bias"), &Tensor::<T>::zeros([l.out_channels()])),
            };
        }
    }
}

impl<T: Scalar> Module<T> for ConvStack<T> {
    fn params(&self) -> Vec<&Param<T>> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 2e-4, beta1: 0.5, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias correction. Moments are stored in the module's
/// parameter order; parameters without a gradient are skipped.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new<M: Module<T> + ?Sized>(config: AdamConfig, module: &M) -> Self {
        let shapes: Vec<Vec<usize>> = module.params().iter().map(|p| p.value().shape().to_vec()).collect();
        Self {
            config,
            step: 0,
            m: shapes.iter().map(|s| Tensor::zeros(s.clone())).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s.clone())).collect(),
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    pub fn update<M: Module<T> + ?Sized>(&mut self, module: &mut M, grads: &Gradients<T>) {
        self.step += 1;
        let b1 = T::lit(self.config.beta1);
        let b2 = T::lit(self.config.beta2);
        let one = T::one();
        let lr = T::lit(self.config.lr);
        let eps = T::lit(self.config.eps);
        let t = self.step as i32;
        let c1 = one - b1.powi(t);
        let c2 = one - b2.powi(t);
        for (i, p) in module.params_mut().into_iter().enumerate() {
            let Some(g) = grads.param(p) else { continue };
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (((w, &gi), mi), vi) in p.value_mut().data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mi = b1 * *mi + (one - b1) * gi;
                *vi = b2 * *vi + (one - b2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Quadratic(Param<f64>);

    impl Module<f64> for Quadratic {
        fn params(&self) -> Vec<&Param<f64>> {
            vec![&self.0]
        }
        fn params_mut(&mut self) -> Vec<&mut Param<f64>> {
            vec![&mut self.0]
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        // With bias correction the first step is lr·sign(g) up to eps.
        let mut q = Quadratic(Param::new("x", Tensor::from_vec([2], vec![3.0, -2.0]).unwrap()));
        let mut opt = Adam::new(AdamConfig { lr: 0.1, ..Default::default() }, &q);
        let g = Graph::new();
        let x = g.bind(&q.0, Binding::Trainable);
        let loss = x.mul(x).unwrap().mean();
        let grads = g.backward(loss).unwrap();
        opt.update(&mut q, &grads);
        let v = q.0.value().data();
        assert!((v[0] - 2.9).abs() < 1e-6);
        assert!((v[1] + 1.9).abs() < 1e-6);
    }

    #[test]
    fn adam_converges_on_quadratic() {
        let mut q = Quadratic(Param::new("x", Tensor::from_vec([1], vec![5.0]).unwrap()));
        let mut opt = Adam::new(AdamConfig { lr: 0.05, beta1: 0.9, ..Default::default() }, &q);
        for _ in 0..2000 {
            let g = Graph::new();
            let x = g.bind(&q.0, Binding::Trainable);
            let grads = g.backward(x.mul(x).unwrap().mean()).unwrap();
            opt.update(&mut q, &grads);
        }
        assert!(q.0.value().data()[0].abs() < 1e-2);
    }

    #[test]
    fn zero_lr_leaves_params_bitwise_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut conv = Conv2d::<f32>::new("c", 2, 2, 3, 1, 1, 0.02, &mut rng);
        let before = conv.checksum();
        let mut opt = Adam::new(AdamConfig { lr: 0.0, ..Default::default() }, &conv);
        let g = Graph::new();
        let x = g.input(Tensor::randn([1, 2, 4, 4], 1.0, &mut rng));
        let y = conv.forward(&g, x, Binding::Trainable).unwrap();
        let grads = g.backward(y.mean()).unwrap();
        opt.update(&mut conv, &grads);
        assert_eq!(before, conv.checksum());
    }

    #[test]
    fn clone_gets_fresh_id() {
        let p = Param::new("p", Tensor::<f32>::zeros([1]));
        assert_ne!(p.id(), p.clone().id());
    }
}
