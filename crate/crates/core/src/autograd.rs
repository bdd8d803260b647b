//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation applied during one forward pass;
//! [`Graph::backward`] walks the tape in reverse. Nodes created with
//! [`Graph::constant`] or [`Graph::stop_gradient`] never receive gradient, so
//! anything upstream of them is untouched by a backward pass.

use std::sync::Arc;

use crate::signal::{MelPlan, StftPlan};
use crate::tensor::{self, ConvGeometry, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    LeakyRelu(f64),
    Elu,
    Tanh,
    Relu,
    Abs,
    Square,
}

impl Unary {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Unary::LeakyRelu(slope) => {
                if x > 0.0 {
                    x
                } else {
                    slope * x
                }
            }
            Unary::Elu => {
                if x > 0.0 {
                    x
                } else {
                    x.exp_m1()
                }
            }
            Unary::Tanh => x.tanh(),
            Unary::Relu => x.max(0.0),
            Unary::Abs => x.abs(),
            Unary::Square => x * x,
        }
    }

    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::LeakyRelu(slope) => {
                if x > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            Unary::Elu => {
                if x > 0.0 {
                    1.0
                } else {
                    y + 1.0
                }
            }
            Unary::Tanh => 1.0 - y * y,
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            Unary::Square => 2.0 * x,
        }
    }
}

enum Op {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geo: ConvGeometry,
    },
    ConvTranspose {
        x: Var,
        w: Var,
        b: Option<Var>,
        geo: ConvGeometry,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Unary(Var, Unary),
    Mean(Var),
    StraightThrough(Var),
    RepeatChannels(Var, usize),
    GroupMean(Var, usize),
    PeriodFold(Var, usize),
    AvgPool {
        x: Var,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    LogMel(Var, Arc<MelPlan>),
    Stft(Var, Arc<StftPlan>),
    WeightNorm {
        v: Var,
        g: Var,
    },
    SpectralNorm {
        w: Var,
        u: Vec<f64>,
        v: Vec<f64>,
        sigma: f64,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// A trainable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copies `x` into a fresh constant: the stop-gradient operator.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
    }

    pub fn conv(&mut self, x: Var, w: Var, b: Option<Var>, geo: ConvGeometry) -> Var {
        let value = tensor::conv1d(self.value(x), self.value(w), b.map(|b| self.value(b)), &geo);
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(value, Op::Conv { x, w, b, geo }, rg)
    }

    pub fn conv_transpose(&mut self, x: Var, w: Var, b: Option<Var>, geo: ConvGeometry) -> Var {
        let value = tensor::conv_transpose1d(self.value(x), self.value(w), b.map(|b| self.value(b)), &geo);
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(value, Op::ConvTranspose { x, w, b, geo }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).map(|x| x * factor);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, factor), rg)
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x + c);
        let rg = self.rg(a);
        self.push(value, Op::Offset(a), rg)
    }

    pub fn unary(&mut self, a: Var, f: Unary) -> Var {
        let value = self.value(a).map(|x| f.apply(x));
        let rg = self.rg(a);
        self.push(value, Op::Unary(a, f), rg)
    }

    /// Mean over every element, as a `[1, 1, 1]` scalar.
    pub fn mean(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).mean());
        let rg = self.rg(a);
        self.push(value, Op::Mean(a), rg)
    }

    /// Sum of scalars (or equally shaped tensors).
    pub fn sum_all(&mut self, vars: &[Var]) -> Var {
        let mut acc = vars[0];
        for &v in &vars[1..] {
            acc = self.add(acc, v);
        }
        acc
    }

    /// Forward value `replacement`, backward identity to `x`.
    pub fn straight_through(&mut self, x: Var, replacement: Tensor) -> Var {
        assert_eq!(self.value(x).shape(), replacement.shape(), "straight-through shape mismatch");
        let rg = self.rg(x);
        self.push(replacement, Op::StraightThrough(x), rg)
    }

    /// `[B, C, T] -> [B, n·C, T]`, copy `i` occupying channels `i·C..(i+1)·C`.
    pub fn repeat_channels(&mut self, x: Var, n: usize) -> Var {
        let xv = self.value(x);
        let [b, c, t] = xv.shape();
        let mut out = Tensor::zeros([b, n * c, t]);
        for bi in 0..b {
            for r in 0..n {
                for ci in 0..c {
                    out.row_mut(bi, r * c + ci).copy_from_slice(xv.row(bi, ci));
                }
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::RepeatChannels(x, n), rg)
    }

    /// `[B, n·C, T] -> [B, C, T]`, averaging the `n` channel groups.
    pub fn group_mean(&mut self, x: Var, n: usize) -> Var {
        let xv = self.value(x);
        let [b, nc, t] = xv.shape();
        assert_eq!(nc % n, 0, "group_mean channels not divisible");
        let c = nc / n;
        let mut out = Tensor::zeros([b, c, t]);
        let inv = 1.0 / n as f64;
        for bi in 0..b {
            for ci in 0..c {
                let row = out.row_mut(bi, ci);
                for r in 0..n {
                    for (o, v) in row.iter_mut().zip(xv.row(bi, r * c + ci)) {
                        *o += v;
                    }
                }
                row.iter_mut().for_each(|o| *o *= inv);
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::GroupMean(x, n), rg)
    }

    /// `[B, 1, T] -> [B·p, 1, ceil(T/p)]`: right-zero-pad to a multiple of
    /// `p`, view as rows of length `p`, and make each column a batch item.
    pub fn period_fold(&mut self, x: Var, period: usize) -> Var {
        let out = period_fold(self.value(x), period);
        let rg = self.rg(x);
        self.push(out, Op::PeriodFold(x, period), rg)
    }

    pub fn avg_pool(&mut self, x: Var, kernel: usize, stride: usize, pad: usize) -> Var {
        let xv = self.value(x);
        let [b, c, t] = xv.shape();
        let out_len = (t + 2 * pad - kernel) / stride + 1;
        let mut out = Tensor::zeros([b, c, out_len]);
        let inv = 1.0 / kernel as f64;
        for bi in 0..b {
            for ci in 0..c {
                let src = xv.row(bi, ci);
                let row = out.row_mut(bi, ci);
                for (o, slot) in row.iter_mut().enumerate() {
                    let start = (o * stride) as isize - pad as isize;
                    let mut acc = 0.0;
                    for k in 0..kernel as isize {
                        let idx = start + k;
                        if idx >= 0 && (idx as usize) < t {
                            acc += src[idx as usize];
                        }
                    }
                    *slot = acc * inv;
                }
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::AvgPool { x, kernel, stride, pad }, rg)
    }

    /// `[B, 1, T] -> [B, num_mels, frames]` log-mel energies.
    pub fn log_mel(&mut self, x: Var, plan: Arc<MelPlan>) -> Var {
        let xv = self.value(x);
        let [b, c, t] = xv.shape();
        assert_eq!(c, 1, "log_mel expects mono input");
        let frames = plan.num_frames(t);
        let mels = plan.config().num_mels;
        let mut data = Vec::with_capacity(b * mels * frames);
        for bi in 0..b {
            data.extend(plan.forward(xv.row(bi, 0)));
        }
        let rg = self.rg(x);
        self.push(Tensor::from_vec([b, mels, frames], data), Op::LogMel(x, plan), rg)
    }

    /// `[B, 1, T] -> [B, 2·bins, frames]` real/imaginary STFT.
    pub fn stft(&mut self, x: Var, plan: Arc<StftPlan>) -> Var {
        let xv = self.value(x);
        let [b, c, t] = xv.shape();
        assert_eq!(c, 1, "stft expects mono input");
        let frames = plan.num_frames(t);
        let mut data = Vec::with_capacity(b * 2 * plan.bins() * frames);
        for bi in 0..b {
            data.extend(plan.forward(xv.row(bi, 0)));
        }
        let rg = self.rg(x);
        let shape = [b, 2 * plan.bins(), frames];
        self.push(Tensor::from_vec(shape, data), Op::Stft(x, plan), rg)
    }

    /// `w = g · v / ‖v‖` per output channel (`v: [O, I, K]`, `g: [O, 1, 1]`).
    pub fn weight_norm(&mut self, v: Var, g: Var) -> Var {
        let vv = self.value(v);
        let gv = self.value(g);
        let [o, i, k] = vv.shape();
        let mut out = vv.clone();
        for oc in 0..o {
            let row = &mut out.data_mut()[oc * i * k..(oc + 1) * i * k];
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            let s = gv.data()[oc] / norm;
            row.iter_mut().for_each(|x| *x *= s);
        }
        let rg = self.rg(v) || self.rg(g);
        self.push(out, Op::WeightNorm { v, g }, rg)
    }

    /// `w / σ` with `σ = uᵀ W v` for fixed power-iteration vectors `u`, `v`
    /// (W viewed as `[O, I·K]`).
    pub fn spectral_norm(&mut self, w: Var, u: Vec<f64>, v: Vec<f64>) -> Var {
        let wv = self.value(w);
        let [o, i, k] = wv.shape();
        let cols = i * k;
        assert_eq!(u.len(), o);
        assert_eq!(v.len(), cols);
        let mut sigma = 0.0;
        for r in 0..o {
            let row = &wv.data()[r * cols..(r + 1) * cols];
            sigma += u[r] * row.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>();
        }
        let sigma = if sigma.abs() < 1e-12 { 1e-12 } else { sigma };
        let out = wv.map(|x| x / sigma);
        let rg = self.rg(w);
        self.push(out, Op::SpectralNorm { w, u, v, sigma }, rg)
    }

    /// Reverse pass from a scalar `loss`. Only nodes that require gradient
    /// receive one.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).numel(), 1, "backward from non-scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        fn accumulate(grads: &mut [Option<Tensor>], nodes: &[Node], v: Var, g: Tensor) {
            if !nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else { continue };
            let nodes = &self.nodes;
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(gy);
                    continue;
                }
                Op::Conv { x, w, b, geo } => {
                    let xv = &nodes[x.0].value;
                    let wv = &nodes[w.0].value;
                    if nodes[x.0].requires_grad {
                        let gx = tensor::conv1d_grad_input(&gy, wv, geo, xv.shape());
                        accumulate(&mut grads, nodes, *x, gx);
                    }
                    if nodes[w.0].requires_grad || b.is_some_and(|b| nodes[b.0].requires_grad) {
                        let (gw, gb) = tensor::conv1d_grad_params(xv, &gy, wv.shape(), geo);
                        accumulate(&mut grads, nodes, *w, gw);
                        if let Some(b) = b {
                            accumulate(&mut grads, nodes, *b, gb);
                        }
                    }
                }
                Op::ConvTranspose { x, w, b, geo } => {
                    let xv = &nodes[x.0].value;
                    let wv = &nodes[w.0].value;
                    if nodes[x.0].requires_grad {
                        let gx = tensor::conv_transpose1d_grad_input(&gy, wv, geo, xv.shape());
                        accumulate(&mut grads, nodes, *x, gx);
                    }
                    if nodes[w.0].requires_grad || b.is_some_and(|b| nodes[b.0].requires_grad) {
                        let (gw, gb) = tensor::conv_transpose1d_grad_params(xv, &gy, wv.shape(), geo);
                        accumulate(&mut grads, nodes, *w, gw);
                        if let Some(b) = b {
                            accumulate(&mut grads, nodes, *b, gb);
                        }
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, nodes, *b, gy.clone());
                    accumulate(&mut grads, nodes, *a, gy);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, nodes, *b, gy.map(|g| -g));
                    accumulate(&mut grads, nodes, *a, gy);
                }
                Op::Mul(a, b) => {
                    let av = &nodes[a.0].value;
                    let bv = &nodes[b.0].value;
                    accumulate(&mut grads, nodes, *a, gy.zip_map(bv, |g, y| g * y));
                    accumulate(&mut grads, nodes, *b, gy.zip_map(av, |g, x| g * x));
                }
                Op::Scale(a, f) => accumulate(&mut grads, nodes, *a, gy.map(|g| g * f)),
                Op::Offset(a) | Op::StraightThrough(a) => accumulate(&mut grads, nodes, *a, gy),
                Op::Unary(a, f) => {
                    let xv = &nodes[a.0].value;
                    let yv = &node.value;
                    let mut gx = gy;
                    for ((g, &x), &y) in gx.data_mut().iter_mut().zip(xv.data()).zip(yv.data()) {
                        *g *= f.derivative(x, y);
                    }
                    accumulate(&mut grads, nodes, *a, gx);
                }
                Op::Mean(a) => {
                    let xv = &nodes[a.0].value;
                    let g = gy.item() / xv.numel() as f64;
                    accumulate(&mut grads, nodes, *a, Tensor::full(xv.shape(), g));
                }
                Op::RepeatChannels(a, n) => {
                    let [b, c, t] = nodes[a.0].value.shape();
                    let mut gx = Tensor::zeros([b, c, t]);
                    for bi in 0..b {
                        for r in 0..*n {
                            for ci in 0..c {
                                let src = gy.row(bi, r * c + ci);
                                for (d, s) in gx.row_mut(bi, ci).iter_mut().zip(src) {
                                    *d += s;
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, nodes, *a, gx);
                }
                Op::GroupMean(a, n) => {
                    let [b, nc, t] = nodes[a.0].value.shape();
                    let c = nc / n;
                    let inv = 1.0 / *n as f64;
                    let mut gx = Tensor::zeros([b, nc, t]);
                    for bi in 0..b {
                        for r in 0..*n {
                            for ci in 0..c {
                                let src = gy.row(bi, ci);
                                for (d, s) in gx.row_mut(bi, r * c + ci).iter_mut().zip(src) {
                                    *d = s * inv;
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, nodes, *a, gx);
                }
                Op::PeriodFold(a, p) => {
                    let shape = nodes[a.0].value.shape();
                    accumulate(&mut grads, nodes, *a, period_unfold(&gy, *p, shape));
                }
                Op::AvgPool { x, kernel, stride, pad } => {
                    let shape = nodes[x.0].value.shape();
                    let [b, c, t] = shape;
                    let inv = 1.0 / *kernel as f64;
                    let mut gx = Tensor::zeros(shape);
                    for bi in 0..b {
                        for ci in 0..c {
                            let g = gy.row(bi, ci);
                            let row = gx.row_mut(bi, ci);
                            for (o, &gv) in g.iter().enumerate() {
                                let start = (o * stride) as isize - *pad as isize;
                                for k in 0..*kernel as isize {
                                    let idx = start + k;
                                    if idx >= 0 && (idx as usize) < t {
                                        row[idx as usize] += gv * inv;
                                    }
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, nodes, *x, gx);
                }
                Op::LogMel(a, plan) => {
                    let xv = &nodes[a.0].value;
                    let [b, _, t] = xv.shape();
                    let per = gy.numel() / b;
                    let mut data = Vec::with_capacity(b * t);
                    for bi in 0..b {
                        data.extend(plan.backward(xv.row(bi, 0), &gy.data()[bi * per..(bi + 1) * per]));
                    }
                    accumulate(&mut grads, nodes, *a, Tensor::from_vec([b, 1, t], data));
                }
                Op::Stft(a, plan) => {
                    let [b, _, t] = nodes[a.0].value.shape();
                    let per = gy.numel() / b;
                    let mut data = Vec::with_capacity(b * t);
                    for bi in 0..b {
                        data.extend(plan.backward(t, &gy.data()[bi * per..(bi + 1) * per]));
                    }
                    accumulate(&mut grads, nodes, *a, Tensor::from_vec([b, 1, t], data));
                }
                Op::WeightNorm { v, g } => {
                    let vv = &nodes[v.0].value;
                    let gv = &nodes[g.0].value;
                    let [o, i, k] = vv.shape();
                    let n = i * k;
                    let mut dv = Tensor::zeros(vv.shape());
                    let mut dg = Tensor::zeros(gv.shape());
                    for oc in 0..o {
                        let vr = &vv.data()[oc * n..(oc + 1) * n];
                        let gr = &gy.data()[oc * n..(oc + 1) * n];
                        let norm = vr.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                        let proj: f64 = gr.iter().zip(vr).map(|(g, v)| g * v / norm).sum();
                        dg.data_mut()[oc] = proj;
                        let s = gv.data()[oc] / norm;
                        for ((d, &g), &v) in dv.data_mut()[oc * n..(oc + 1) * n].iter_mut().zip(gr).zip(vr) {
                            *d = s * (g - v / norm * proj);
                        }
                    }
                    accumulate(&mut grads, nodes, *g, dg);
                    accumulate(&mut grads, nodes, *v, dv);
                }
                Op::SpectralNorm { w, u, v, sigma } => {
                    let wv = &nodes[w.0].value;
                    let cols = v.len();
                    let inner: f64 = gy.data().iter().zip(wv.data()).map(|(g, w)| g * w).sum();
                    let coef = inner / (sigma * sigma);
                    let mut gw = gy.map(|g| g / sigma);
                    for (r, &ur) in u.iter().enumerate() {
                        for (c, &vc) in v.iter().enumerate() {
                            gw.data_mut()[r * cols + c] -= coef * ur * vc;
                        }
                    }
                    accumulate(&mut grads, nodes, *w, gw);
                }
            }
        }
        Gradients { grads }
    }
}

pub fn period_fold(x: &Tensor, period: usize) -> Tensor {
    let [b, c, t] = x.shape();
    assert_eq!(c, 1, "period_fold expects mono input");
    let rows = t.div_ceil(period);
    let mut out = Tensor::zeros([b * period, 1, rows]);
    for bi in 0..b {
        let src = x.row(bi, 0);
        for (n, &v) in src.iter().enumerate() {
            out.row_mut(bi * period + n % period, 0)[n / period] = v;
        }
    }
    out
}

/// Inverse of [`period_fold`] (drops the right padding).
pub fn period_unfold(folded: &Tensor, period: usize, shape: [usize; 3]) -> Tensor {
    let [b, _, t] = shape;
    let mut out = Tensor::zeros(shape);
    for bi in 0..b {
        let row = out.row_mut(bi, 0);
        for (n, slot) in row.iter_mut().enumerate().take(t) {
            *slot = folded.row(bi * period + n % period, 0)[n / period];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: [usize; 3], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Central-difference check of d(loss)/d(input) for a graph builder.
    fn check_gradient(input: Tensor, build: impl Fn(&mut Graph, Var) -> Var) {
        let mut g = Graph::new();
        let x = g.leaf(input.clone());
        let loss = build(&mut g, x);
        let grads = g.backward(loss);
        let analytic = grads.get(x).cloned().unwrap_or_else(|| Tensor::zeros(input.shape()));
        let eval = |t: Tensor| {
            let mut g = Graph::new();
            let x = g.leaf(t);
            let l = build(&mut g, x);
            g.value(l).item()
        };
        let h = 1e-6;
        for i in 0..input.numel() {
            let (mut p, mut m) = (input.clone(), input.clone());
            p.data_mut()[i] += h;
            m.data_mut()[i] -= h;
            let fd = (eval(p) - eval(m)) / (2.0 * h);
            let a = analytic.data()[i];
            assert!((fd - a).abs() <= 1e-5 * (1.0 + fd.abs()), "element {i}: fd {fd} analytic {a}");
        }
    }

    fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> Var {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let probe = random(g.value(y).shape(), &mut rng);
        let p = g.constant(probe);
        let m = g.mul(y, p);
        g.mean(m)
    }

    #[test]
    fn unary_ops_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for f in [Unary::LeakyRelu(0.2), Unary::Elu, Unary::Tanh, Unary::Square, Unary::Abs, Unary::Relu] {
            check_gradient(random([2, 3, 5], &mut rng), |g, x| {
                let y = g.unary(x, f);
                weighted_sum(g, y, 2)
            });
        }
    }

    #[test]
    fn structural_ops_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        check_gradient(random([2, 2, 7], &mut rng), |g, x| {
            let r = g.repeat_channels(x, 3);
            let s = g.scale(r, 1.5);
            let m = g.group_mean(s, 3);
            let o = g.offset(m, 0.25);
            weighted_sum(g, o, 4)
        });
        check_gradient(random([2, 1, 11], &mut rng), |g, x| {
            let f = g.period_fold(x, 3);
            weighted_sum(g, f, 5)
        });
        check_gradient(random([1, 2, 13], &mut rng), |g, x| {
            let p = g.avg_pool(x, 4, 2, 2);
            weighted_sum(g, p, 6)
        });
    }

    #[test]
    fn weight_and_spectral_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let gain = random([3, 1, 1], &mut rng);
        check_gradient(random([3, 2, 2], &mut rng), move |g, v| {
            let gn = g.constant(gain.clone());
            let w = g.weight_norm(v, gn);
            weighted_sum(g, w, 8)
        });
        let v0 = random([3, 2, 2], &mut rng);
        check_gradient(random([3, 1, 1], &mut rng), move |g, gn| {
            let v = g.constant(v0.clone());
            let w = g.weight_norm(v, gn);
            weighted_sum(g, w, 9)
        });
        let u: Vec<f64> = vec![0.6, 0.0, 0.8];
        let v: Vec<f64> = vec![0.5, 0.5, 0.5, 0.5];
        check_gradient(random([3, 2, 2], &mut rng), move |g, w| {
            let s = g.spectral_norm(w, u.clone(), v.clone());
            weighted_sum(g, s, 10)
        });
    }

    #[test]
    fn straight_through_passes_gradient_unchanged() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::signal(&[0.1, 0.2, 0.3]));
        let q = g.straight_through(x, Tensor::signal(&[1.0, 2.0, 3.0]));
        assert_eq!(g.value(q).data(), &[1.0, 2.0, 3.0]);
        let sq = g.unary(q, Unary::Square);
        let l = g.mean(sq);
        let grads = g.backward(l);
        // d/dq mean(q²) = 2q/3, passed to x unchanged.
        let gx = grads.get(x).unwrap().data().to_vec();
        for (a, b) in gx.iter().zip([2.0 / 3.0, 4.0 / 3.0, 2.0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn stop_gradient_blocks_upstream() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::signal(&[0.5, -0.5]));
        let y = g.unary(x, Unary::Tanh);
        let s = g.stop_gradient(y);
        let z = g.unary(s, Unary::Square);
        let l = g.mean(z);
        let grads = g.backward(l);
        assert!(grads.get(x).is_none());
        assert!(!g.requires_grad(l));
    }

    #[test]
    fn period_fold_inverts_for_divisible_lengths() {
        let x = Tensor::from_vec([1, 1, 12], (0..12).map(f64::from).collect());
        let f = period_fold(&x, 4);
        assert_eq!(f.shape(), [4, 1, 3]);
        assert_eq!(f.row(1, 0), &[1.0, 5.0, 9.0]);
        assert_eq!(period_unfold(&f, 4, x.shape()), x);
        let odd = Tensor::from_vec([1, 1, 101], vec![1.0; 101]);
        assert_eq!(period_fold(&odd, 4).shape(), [4, 1, 26]);
    }
}
