//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Calling
//! [`Graph::backward`] on a scalar output walks the tape in reverse and
//! returns gradients for every leaf that was created as trainable.
//! Parameters enter the tape through [`Graph::bind`]; binding the same
//! parameter twice yields the same node, so networks applied more than once
//! in a step (cycle reconstruction) accumulate their gradients.

use std::cell::{Ref, RefCell};
use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::nn::{Param, ParamId};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

type NodeId = usize;

/// How a parameter participates in a graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binding {
    /// Gradient is collected for the optimizer.
    Trainable,
    /// Used as a constant: no gradient is ever computed for it.
    Frozen,
}

enum Op<T> {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    AddScalar(NodeId),
    Conv2d { input: NodeId, weight: NodeId, bias: Option<NodeId>, stride: usize, pad: usize },
    Upsample2x(NodeId),
    InstanceNorm { input: NodeId, inv_std: Vec<T> },
    LeakyRelu(NodeId, T),
    Tanh(NodeId),
    Sigmoid(NodeId),
    SoftmaxChannels(NodeId),
    GroupSumChannels { input: NodeId, groups: Vec<Vec<usize>> },
    ConcatChannels(Vec<NodeId>),
    Mean(NodeId),
    MeanHw(NodeId),
    L1(NodeId, NodeId),
    BceWithLogits(NodeId, T),
    SquaredErrorTo(NodeId, T),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

struct Tape<T> {
    nodes: Vec<Node<T>>,
    bound: HashMap<ParamId, NodeId>,
}

/// Recording context for one forward/backward pass.
pub struct Graph<T: Scalar> {
    tape: RefCell<Tape<T>>,
}

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, T: Scalar> {
    graph: &'g Graph<T>,
    id: NodeId,
}

/// Output of [`Graph::backward`].
pub struct Gradients<T> {
    leaves: HashMap<NodeId, Tensor<T>>,
    params: HashMap<ParamId, NodeId>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a trainable parameter, `None` if it was never bound as
    /// trainable or did not influence the output.
    pub fn param(&self, p: &Param<T>) -> Option<&Tensor<T>> {
        self.params.get(&p.id()).and_then(|n| self.leaves.get(n))
    }

    /// Gradient of a leaf created with [`Graph::leaf`].
    pub fn wrt(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.leaves.get(&v.id)
    }

    /// Sum of absolute gradient entries over `params`; zero for parameters
    /// that carry no gradient.
    pub fn abs_sum<'a>(&self, params: impl IntoIterator<Item = &'a Param<T>>) -> f64 {
        params
            .into_iter()
            .filter_map(|p| self.param(p))
            .map(|g| g.data().iter().map(|v| v.abs().to_f64_lossless()).sum::<f64>())
            .sum()
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

pub fn conv_out_size(size: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - kernel) / stride + 1
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { tape: RefCell::new(Tape { nodes: Vec::new(), bound: HashMap::new() }) }
    }

    pub fn len(&self) -> usize {
        self.tape.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut tape = self.tape.borrow_mut();
        tape.nodes.push(Node { value, op, requires_grad });
        Var { graph: self, id: tape.nodes.len() - 1 }
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        let tape = self.tape.borrow();
        ids.iter().any(|&i| tape.nodes[i].requires_grad)
    }

    /// Constant input; no gradient flows into it.
    pub fn input(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true)
    }

    /// Records a parameter. A parameter bound twice returns its first node.
    pub fn bind(&self, p: &Param<T>, binding: Binding) -> Var<'_, T> {
        if let Some(&id) = self.tape.borrow().bound.get(&p.id()) {
            return Var { graph: self, id };
        }
        let v = self.push(p.value().clone(), Op::Leaf, binding == Binding::Trainable);
        if binding == Binding::Trainable {
            self.tape.borrow_mut().bound.insert(p.id(), v.id);
        }
        v
    }

    fn value(&self, id: NodeId) -> Ref<'_, Tensor<T>> {
        Ref::map(self.tape.borrow(), |t| &t.nodes[id].value)
    }

    /// Reverse pass from a one-element output.
    pub fn backward(&self, output: Var<'_, T>) -> Result<Gradients<T>> {
        let tape = self.tape.borrow();
        let out = &tape.nodes[output.id];
        if out.value.len() != 1 {
            return Err(Error::Shape(format!("backward from non-scalar {:?}", out.value.shape())));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=output.id).map(|_| None).collect();
        grads[output.id] = Some(Tensor::full(out.value.shape().to_vec(), T::one()));
        let mut leaves = HashMap::new();

        for id in (0..=output.id).rev() {
            let Some(grad) = grads[id].take() else { continue };
            let node = &tape.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaves.insert(id, grad);
                continue;
            }
            backprop(&tape.nodes, id, &grad, &mut grads)?;
        }
        Ok(Gradients { leaves, params: tape.bound.clone() })
    }

    pub fn concat_channels<'g>(&'g self, items: &[Var<'g, T>]) -> Result<Var<'g, T>> {
        let ids: Vec<NodeId> = items.iter().map(|v| v.id).collect();
        let value = {
            let tape = self.tape.borrow();
            let refs: Vec<&Tensor<T>> = ids.iter().map(|&i| &tape.nodes[i].value).collect();
            Tensor::concat_channels(&refs)?
        };
        let rg = self.rg(&ids);
        Ok(self.push(value, Op::ConcatChannels(ids), rg))
    }
}

fn accumulate<T: Scalar>(nodes: &[Node<T>], grads: &mut [Option<Tensor<T>>], id: NodeId, g: Tensor<T>) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(existing) => existing.add_assign(&g),
        slot => *slot = Some(g),
    }
}

fn backprop<T: Scalar>(
    nodes: &[Node<T>],
    id: NodeId,
    grad: &Tensor<T>,
    grads: &mut [Option<Tensor<T>>],
) -> Result<()> {
    let node = &nodes[id];
    let val = |i: NodeId| &nodes[i].value;
    let needs = |i: NodeId| nodes[i].requires_grad;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, grad.clone());
            accumulate(nodes, grads, *b, grad.clone());
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, grad.clone());
            accumulate(nodes, grads, *b, grad.map(|g| -g));
        }
        Op::Mul(a, b) => {
            if needs(*a) {
                accumulate(nodes, grads, *a, grad.zip_map(val(*b), |g, y| g * y)?);
            }
            if needs(*b) {
                accumulate(nodes, grads, *b, grad.zip_map(val(*a), |g, x| g * x)?);
            }
        }
        Op::Scale(a, s) => {
            let s = *s;
            accumulate(nodes, grads, *a, grad.map(|g| g * s));
        }
        Op::AddScalar(a) => accumulate(nodes, grads, *a, grad.clone()),
        Op::Conv2d { input, weight, bias, stride, pad } => {
            let (dx, dw, db) = conv2d_backward(
                val(*input),
                val(*weight),
                grad,
                *stride,
                *pad,
                needs(*input),
                needs(*weight),
                bias.map(needs).unwrap_or(false),
            )?;
            if let Some(dx) = dx {
                accumulate(nodes, grads, *input, dx);
            }
            if let Some(dw) = dw {
                accumulate(nodes, grads, *weight, dw);
            }
            if let (Some(b), Some(db)) = (bias, db) {
                accumulate(nodes, grads, *b, db);
            }
        }
        Op::Upsample2x(a) => {
            let (n, c, h, w) = val(*a).dims4()?;
            let mut dx = Tensor::zeros([n, c, h, w]);
            let g = grad.data();
            let d = dx.data_mut();
            for plane in 0..n * c {
                for i in 0..2 * h {
                    for j in 0..2 * w {
                        d[plane * h * w + (i / 2) * w + j / 2] += g[plane * 4 * h * w + i * 2 * w + j];
                    }
                }
            }
            accumulate(nodes, grads, *a, dx);
        }
        Op::InstanceNorm { input, inv_std } => {
            let y = &node.value;
            let (n, c, h, w) = y.dims4()?;
            let hw = h * w;
            let inv_hw = T::one() / T::from_usize(hw).unwrap();
            let mut dx = Tensor::zeros([n, c, h, w]);
            for (plane, &k) in inv_std.iter().enumerate().take(n * c) {
                let s = plane * hw..(plane + 1) * hw;
                let gy = &grad.data()[s.clone()];
                let yy = &y.data()[s.clone()];
                let mean_g: T = gy.iter().copied().sum::<T>() * inv_hw;
                let mean_gy: T = gy.iter().zip(yy).map(|(&g, &v)| g * v).sum::<T>() * inv_hw;
                for (o, (&g, &v)) in dx.data_mut()[s].iter_mut().zip(gy.iter().zip(yy)) {
                    *o = k * (g - mean_g - v * mean_gy);
                }
            }
            accumulate(nodes, grads, *input, dx);
        }
        Op::LeakyRelu(a, slope) => {
            let slope = *slope;
            let dx = grad.zip_map(val(*a), |g, x| if x > T::zero() { g } else { g * slope })?;
            accumulate(nodes, grads, *a, dx);
        }
        Op::Tanh(a) => {
            let dx = grad.zip_map(&node.value, |g, y| g * (T::one() - y * y))?;
            accumulate(nodes, grads, *a, dx);
        }
        Op::Sigmoid(a) => {
            let dx = grad.zip_map(&node.value, |g, y| g * y * (T::one() - y))?;
            accumulate(nodes, grads, *a, dx);
        }
        Op::SoftmaxChannels(a) => {
            let y = &node.value;
            let (n, c, h, w) = y.dims4()?;
            let hw = h * w;
            let mut dx = Tensor::zeros([n, c, h, w]);
            let (yd, gd) = (y.data(), grad.data());
            let dd = dx.data_mut();
            for b in 0..n {
                let base = b * c * hw;
                for p in 0..hw {
                    let mut dot = T::zero();
                    for k in 0..c {
                        dot += yd[base + k * hw + p] * gd[base + k * hw + p];
                    }
                    for k in 0..c {
                        let i = base + k * hw + p;
                        dd[i] = yd[i] * (gd[i] - dot);
                    }
                }
            }
            accumulate(nodes, grads, *a, dx);
        }
        Op::GroupSumChannels { input, groups } => {
            let (n, c, h, w) = val(*input).dims4()?;
            let hw = h * w;
            let mut dx = Tensor::zeros([n, c, h, w]);
            let gd = grad.data();
            let g_count = groups.len();
            for b in 0..n {
                for (gi, members) in groups.iter().enumerate() {
                    let src = &gd[(b * g_count + gi) * hw..(b * g_count + gi + 1) * hw];
                    for &ch in members {
                        let dst = &mut dx.data_mut()[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
            }
            accumulate(nodes, grads, *input, dx);
        }
        Op::ConcatChannels(ids) => {
            let (n, total, h, w) = grad.dims4()?;
            let hw = h * w;
            let mut offset = 0;
            for &i in ids {
                let c = val(i).dims4()?.1;
                if needs(i) {
                    let mut part = Vec::with_capacity(n * c * hw);
                    for b in 0..n {
                        let start = (b * total + offset) * hw;
                        part.extend_from_slice(&grad.data()[start..start + c * hw]);
                    }
                    accumulate(nodes, grads, i, Tensor::from_vec([n, c, h, w], part)?);
                }
                offset += c;
            }
        }
        Op::Mean(a) => {
            let x = val(*a);
            let g = grad.item() / T::from_usize(x.len()).unwrap();
            accumulate(nodes, grads, *a, Tensor::full(x.shape().to_vec(), g));
        }
        Op::MeanHw(a) => {
            let (n, c, h, w) = val(*a).dims4()?;
            let hw = h * w;
            let inv = T::one() / T::from_usize(hw).unwrap();
            let mut dx = Tensor::zeros([n, c, h, w]);
            for (plane, chunk) in dx.data_mut().chunks_mut(hw).enumerate() {
                chunk.fill(grad.data()[plane] * inv);
            }
            accumulate(nodes, grads, *a, dx);
        }
        Op::L1(a, b) => {
            let scale = grad.item() / T::from_usize(val(*a).len()).unwrap();
            let sign = val(*a).zip_map(val(*b), |x, y| {
                let d = x - y;
                if d > T::zero() {
                    scale
                } else if d < T::zero() {
                    -scale
                } else {
                    T::zero()
                }
            })?;
            if needs(*b) {
                accumulate(nodes, grads, *b, sign.map(|s| -s));
            }
            accumulate(nodes, grads, *a, sign);
        }
        Op::BceWithLogits(a, target) => {
            let x = val(*a);
            let scale = grad.item() / T::from_usize(x.len()).unwrap();
            let t = *target;
            accumulate(nodes, grads, *a, x.map(|z| (sigmoid(z) - t) * scale));
        }
        Op::SquaredErrorTo(a, target) => {
            let x = val(*a);
            let scale = grad.item() * T::lit(2.0) / T::from_usize(x.len()).unwrap();
            let t = *target;
            accumulate(nodes, grads, *a, x.map(|z| (z - t) * scale));
        }
    }
    Ok(())
}

pub(crate) fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// `max(z, 0) - z·t + ln(1 + e^{-|z|})`, the numerically stable form of
/// `-(t ln σ(z) + (1-t) ln(1-σ(z)))`.
pub(crate) fn bce_logit<T: Scalar>(z: T, t: T) -> T {
    z.max(T::zero()) - z * t + (-z.abs()).exp().ln_1p()
}

/// Output columns `oj` whose input column `oj·stride + kj - pad` lies in
/// `0..w`.
fn valid_cols(w: usize, wo: usize, kj: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if kj >= pad { 0 } else { (pad - kj).div_ceil(stride) };
    let hi = if w + pad <= kj { 0 } else { (w + pad - kj).div_ceil(stride).min(wo) };
    (lo.min(hi), hi)
}

fn im2col<T: Scalar>(
    x: &[T],
    (c, h, w): (usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
    (ho, wo): (usize, usize),
    cols: &mut [T],
) {
    let hw_out = ho * wo;
    for ch in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let dst = &mut cols[row * hw_out..(row + 1) * hw_out];
                let (lo, hi) = valid_cols(w, wo, kj, stride, pad);
                for oi in 0..ho {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    let drow = &mut dst[oi * wo..(oi + 1) * wo];
                    if ii < 0 || ii >= h as isize || lo == hi {
                        drow.fill(T::zero());
                        continue;
                    }
                    let srow = &x[(ch * h + ii as usize) * w..(ch * h + ii as usize + 1) * w];
                    drow[..lo].fill(T::zero());
                    drow[hi..].fill(T::zero());
                    let j0 = lo * stride + kj - pad;
                    if stride == 1 {
                        drow[lo..hi].copy_from_slice(&srow[j0..j0 + hi - lo]);
                    } else {
                        for (d, s) in drow[lo..hi].iter_mut().zip(srow[j0..].iter().step_by(stride)) {
                            *d = *s;
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(
    cols: &[T],
    (c, h, w): (usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
    (ho, wo): (usize, usize),
    dx: &mut [T],
) {
    let hw_out = ho * wo;
    for ch in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let src = &cols[row * hw_out..(row + 1) * hw_out];
                let (lo, hi) = valid_cols(w, wo, kj, stride, pad);
                if lo == hi {
                    continue;
                }
                let j0 = lo * stride + kj - pad;
                for oi in 0..ho {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let drow = &mut dx[(ch * h + ii as usize) * w..(ch * h + ii as usize + 1) * w];
                    let srow = &src[oi * wo + lo..oi * wo + hi];
                    if stride == 1 {
                        for (d, s) in drow[j0..j0 + hi - lo].iter_mut().zip(srow) {
                            *d += *s;
                        }
                    } else {
                        for (d, s) in drow[j0..].iter_mut().step_by(stride).zip(srow) {
                            *d += *s;
                        }
                    }
                }
            }
        }
    }
}

struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, stride: usize, pad: usize) -> Result<Self> {
        let (n, c, h, w) = x.dims4()?;
        let (cout, cin, k, k2) = weight.dims4()?;
        if cin != c {
            return Err(Error::ChannelMismatch { expected: cin, got: c });
        }
        if k != k2 {
            return Err(Error::Shape(format!("non-square kernel {:?}", weight.shape())));
        }
        if h + 2 * pad < k || w + 2 * pad < k || stride == 0 {
            return Err(Error::Shape(format!("kernel {k} does not fit input {h}x{w} with padding {pad}")));
        }
        Ok(Self {
            n,
            c,
            h,
            w,
            cout,
            k,
            ho: conv_out_size(h, k, stride, pad),
            wo: conv_out_size(w, k, stride, pad),
        })
    }

    fn direct(&self, stride: usize, pad: usize) -> bool {
        self.k == 1 && stride == 1 && pad == 0
    }
}

fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(x, weight, stride, pad)?;
    let ckk = g.c * g.k * g.k;
    let hw_out = g.ho * g.wo;
    let mut out = Tensor::zeros([g.n, g.cout, g.ho, g.wo]);
    let mut cols = vec![T::zero(); if g.direct(stride, pad) { 0 } else { ckk * hw_out }];
    let in_plane = g.c * g.h * g.w;
    for b in 0..g.n {
        let xs = &x.data()[b * in_plane..(b + 1) * in_plane];
        let cols_ref: &[T] = if g.direct(stride, pad) {
            xs
        } else {
            im2col(xs, (g.c, g.h, g.w), g.k, stride, pad, (g.ho, g.wo), &mut cols);
            &cols
        };
        let ys = &mut out.data_mut()[b * g.cout * hw_out..(b + 1) * g.cout * hw_out];
        if let Some(bias) = bias {
            for (co, chunk) in ys.chunks_mut(hw_out).enumerate() {
                chunk.fill(bias.data()[co]);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        T::gemm(
            g.cout,
            ckk,
            hw_out,
            T::one(),
            weight.data(),
            ckk as isize,
            1,
            cols_ref,
            hw_out as isize,
            1,
            beta,
            ys,
            hw_out as isize,
            1,
        );
    }
    Ok(out)
}

type ConvGrads<T> = (Option<Tensor<T>>, Option<Tensor<T>>, Option<Tensor<T>>);

#[allow(clippy::too_many_arguments)]
fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad: &Tensor<T>,
    stride: usize,
    pad: usize,
    want_dx: bool,
    want_dw: bool,
    want_db: bool,
) -> Result<ConvGrads<T>> {
    let g = ConvGeom::new(x, weight, stride, pad)?;
    let ckk = g.c * g.k * g.k;
    let hw_out = g.ho * g.wo;
    let in_plane = g.c * g.h * g.w;
    let direct = g.direct(stride, pad);
    let mut dx = want_dx.then(|| Tensor::zeros([g.n, g.c, g.h, g.w]));
    let mut dw = want_dw.then(|| Tensor::zeros(weight.shape().to_vec()));
    let mut db = want_db.then(|| Tensor::zeros([g.cout]));
    let mut cols = vec![T::zero(); if direct { 0 } else { ckk * hw_out }];
    let mut dcols = vec![T::zero(); if want_dx && !direct { ckk * hw_out } else { 0 }];

    for b in 0..g.n {
        let gy = &grad.data()[b * g.cout * hw_out..(b + 1) * g.cout * hw_out];
        if let Some(db) = db.as_mut() {
            for (co, chunk) in gy.chunks(hw_out).enumerate() {
                db.data_mut()[co] += chunk.iter().copied().sum::<T>();
            }
        }
        let xs = &x.data()[b * in_plane..(b + 1) * in_plane];
        if let Some(dw) = dw.as_mut() {
            let cols_ref: &[T] = if direct {
                xs
            } else {
                im2col(xs, (g.c, g.h, g.w), g.k, stride, pad, (g.ho, g.wo), &mut cols);
                &cols
            };
            // dW += dY · colsᵀ
            T::gemm(
                g.cout,
                hw_out,
                ckk,
                T::one(),
                gy,
                hw_out as isize,
                1,
                cols_ref,
                1,
                hw_out as isize,
                T::one(),
                dw.data_mut(),
                ckk as isize,
                1,
            );
        }
        if let Some(dx) = dx.as_mut() {
            let dxs = &mut dx.data_mut()[b * in_plane..(b + 1) * in_plane];
            // dcols = Wᵀ · dY
            if direct {
                T::gemm(
                    ckk, g.cout, hw_out, T::one(), weight.data(), 1, ckk as isize, gy, hw_out as isize, 1,
                    T::zero(), dxs, hw_out as isize, 1,
                );
            } else {
                T::gemm(
                    ckk,
                    g.cout,
                    hw_out,
                    T::one(),
                    weight.data(),
                    1,
                    ckk as isize,
                    gy,
                    hw_out as isize,
                    1,
                    T::zero(),
                    &mut dcols,
                    hw_out as isize,
                    1,
                );
                col2im(&dcols, (g.c, g.h, g.w), g.k, stride, pad, (g.ho, g.wo), dxs);
            }
        }
    }
    Ok((dx, dw, db))
}

impl<'g, T: Scalar> Var<'g, T> {
    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn value(&self) -> Ref<'g, Tensor<T>> {
        self.graph.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    /// Value of a one-element var.
    pub fn item(&self) -> T {
        self.value().item()
    }

    /// Copy of the value as a new constant, cutting gradient flow.
    pub fn detach(&self) -> Var<'g, T> {
        let v = self.value().clone();
        self.graph.input(v)
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.rg(&[self.id])
    }

    fn unary(&self, value: Tensor<T>, op: Op<T>) -> Var<'g, T> {
        let rg = self.requires_grad();
        self.graph.push(value, op, rg)
    }

    fn binary(&self, other: Var<'g, T>, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var<'g, T>> {
        let value = self.value().zip_map(&other.value(), f)?;
        let rg = self.graph.rg(&[self.id, other.id]);
        Ok(self.graph.push(value, op, rg))
    }

    pub fn add(&self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(other, |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(other, |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(&self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(other, |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn scale(&self, s: T) -> Var<'g, T> {
        let v = self.value().map(|x| x * s);
        self.unary(v, Op::Scale(self.id, s))
    }

    pub fn add_scalar(&self, s: T) -> Var<'g, T> {
        let v = self.value().map(|x| x + s);
        self.unary(v, Op::AddScalar(self.id))
    }

    /// Zero-padded 2-D convolution, weight `[cout, cin, k, k]`, bias `[cout]`.
    pub fn conv2d(&self, weight: Var<'g, T>, bias: Option<Var<'g, T>>, stride: usize, pad: usize) -> Result<Var<'g, T>> {
        let value = {
            let b = bias.map(|b| b.value());
            conv2d_forward(&self.value(), &weight.value(), b.as_deref(), stride, pad)?
        };
        let mut ids = vec![self.id, weight.id];
        ids.extend(bias.map(|b| b.id));
        let rg = self.graph.rg(&ids);
        Ok(self.graph.push(
            value,
            Op::Conv2d { input: self.id, weight: weight.id, bias: bias.map(|b| b.id), stride, pad },
            rg,
        ))
    }

    /// Nearest-neighbour 2× spatial upsampling.
    pub fn upsample2x(&self) -> Result<Var<'g, T>> {
        let value = {
            let x = self.value();
            let (n, c, h, w) = x.dims4()?;
            let mut out = Vec::with_capacity(n * c * 4 * h * w);
            for plane in x.data().chunks(h * w) {
                for i in 0..2 * h {
                    let row = &plane[(i / 2) * w..(i / 2 + 1) * w];
                    for j in 0..2 * w {
                        out.push(row[j / 2]);
                    }
                }
            }
            Tensor::from_vec([n, c, 2 * h, 2 * w], out)?
        };
        Ok(self.unary(value, Op::Upsample2x(self.id)))
    }

    /// Per-sample, per-channel normalization over the spatial axes.
    pub fn instance_norm(&self, eps: T) -> Result<Var<'g, T>> {
        let (value, inv_std) = {
            let x = self.value();
            let (_, _, h, w) = x.dims4()?;
            let hw = T::from_usize(h * w).unwrap();
            let mut out = x.clone();
            let mut inv_std = Vec::new();
            for plane in out.data_mut().chunks_mut(h * w) {
                let mean = plane.iter().copied().sum::<T>() / hw;
                let var = plane.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / hw;
                let k = T::one() / (var + eps).sqrt();
                for v in plane.iter_mut() {
                    *v = (*v - mean) * k;
                }
                inv_std.push(k);
            }
            (out, inv_std)
        };
        Ok(self.unary(value, Op::InstanceNorm { input: self.id, inv_std }))
    }

    pub fn leaky_relu(&self, slope: T) -> Var<'g, T> {
        let v = self.value().map(|x| if x > T::zero() { x } else { x * slope });
        self.unary(v, Op::LeakyRelu(self.id, slope))
    }

    pub fn relu(&self) -> Var<'g, T> {
        self.leaky_relu(T::zero())
    }

    pub fn tanh(&self) -> Var<'g, T> {
        let v = self.value().map(|x| x.tanh());
        self.unary(v, Op::Tanh(self.id))
    }

    pub fn sigmoid(&self) -> Var<'g, T> {
        let v = self.value().map(sigmoid);
        self.unary(v, Op::Sigmoid(self.id))
    }

    /// Softmax across the channel axis at every pixel.
    pub fn softmax_channels(&self) -> Result<Var<'g, T>> {
        let value = {
            let x = self.value();
            let (n, c, h, w) = x.dims4()?;
            let hw = h * w;
            let mut out = x.clone();
            let d = out.data_mut();
            for b in 0..n {
                let base = b * c * hw;
                for p in 0..hw {
                    let mut m = T::neg_infinity();
                    for k in 0..c {
                        m = m.max(d[base + k * hw + p]);
                    }
                    let mut s = T::zero();
                    for k in 0..c {
                        let e = (d[base + k * hw + p] - m).exp();
                        d[base + k * hw + p] = e;
                        s += e;
                    }
                    for k in 0..c {
                        d[base + k * hw + p] /= s;
                    }
                }
            }
            out
        };
        Ok(self.unary(value, Op::SoftmaxChannels(self.id)))
    }

    /// Output channel `g` is the sum of input channels `groups[g]`.
    pub fn group_sum_channels(&self, groups: Vec<Vec<usize>>) -> Result<Var<'g, T>> {
        let value = {
            let x = self.value();
            let (n, c, h, w) = x.dims4()?;
            if let Some(&bad) = groups.iter().flatten().find(|&&ch| ch >= c) {
                return Err(Error::Shape(format!("channel {bad} out of {c}")));
            }
            let hw = h * w;
            let mut out = Tensor::zeros([n, groups.len(), h, w]);
            let xd = x.data();
            for b in 0..n {
                for (gi, members) in groups.iter().enumerate() {
                    let dst = &mut out.data_mut()[(b * groups.len() + gi) * hw..(b * groups.len() + gi + 1) * hw];
                    for &ch in members {
                        let src = &xd[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
            }
            out
        };
        Ok(self.unary(value, Op::GroupSumChannels { input: self.id, groups }))
    }

    /// Mean over all elements, as a rank-0 var.
    pub fn mean(&self) -> Var<'g, T> {
        let v = Tensor::scalar(self.value().mean());
        self.unary(v, Op::Mean(self.id))
    }

    /// Spatial mean: `[n, c, h, w] -> [n, c, 1, 1]`.
    pub fn mean_hw(&self) -> Result<Var<'g, T>> {
        let value = {
            let x = self.value();
            let (n, c, h, w) = x.dims4()?;
            let hw = T::from_usize(h * w).unwrap();
            let data = x.data().chunks(h * w).map(|p| p.iter().copied().sum::<T>() / hw).collect();
            Tensor::from_vec([n, c, 1, 1], data)?
        };
        Ok(self.unary(value, Op::MeanHw(self.id)))
    }

    /// Mean absolute difference to `other`.
    pub fn l1(&self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        let value = {
            let d = self.value().zip_map(&other.value(), |a, b| (a - b).abs())?;
            Tensor::scalar(d.mean())
        };
        let rg = self.graph.rg(&[self.id, other.id]);
        Ok(self.graph.push(value, Op::L1(self.id, other.id), rg))
    }

    /// Mean binary cross-entropy of logits against a constant target.
    pub fn bce_with_logits(&self, target: T) -> Var<'g, T> {
        let v = {
            let x = self.value();
            let n = T::from_usize(x.len()).unwrap();
            Tensor::scalar(x.data().iter().map(|&z| bce_logit(z, target)).sum::<T>() / n)
        };
        self.unary(v, Op::BceWithLogits(self.id, target))
    }

    /// Mean squared distance to a constant target.
    pub fn squared_error_to(&self, target: T) -> Var<'g, T> {
        let v = {
            let x = self.value();
            let n = T::from_usize(x.len()).unwrap();
            Tensor::scalar(x.data().iter().map(|&z| (z - target) * (z - target)).sum::<T>() / n)
        };
        self.unary(v, Op::SquaredErrorTo(self.id, target))
    }
}
