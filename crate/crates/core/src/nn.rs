//! Named parameters, layer descriptions and one interpreter that runs a layer
//! tree three ways: recorded on an autograd [`Graph`] for training, as plain
//! batch inference, and chunk-by-chunk with cached causal history.

use std::collections::{BTreeMap, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Gradients, Graph, Unary, Var};
use crate::error::{Error, Result};
use crate::tensor::{self, ConvGeometry, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Activation {
    LeakyRelu { slope: f64 },
    Elu,
}

impl Activation {
    pub fn unary(self) -> Unary {
        match self {
            Activation::LeakyRelu { slope } => Unary::LeakyRelu(slope),
            Activation::Elu => Unary::Elu,
        }
    }
}

/// Named weight arrays, ordered by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Shape(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> Vec<String> {
        self.params.keys().cloned().collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Parameters whose name starts with `prefix`.
    pub fn with_prefix(&self, prefix: &str) -> ParamStore {
        ParamStore {
            params: self
                .params
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn extend(&mut self, other: ParamStore) {
        self.params.extend(other.params);
    }

    /// SHA-256 over names, shapes and little-endian values of the
    /// parameters under `prefix`.
    pub fn hash_prefix(&self, prefix: &str) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.params.iter().filter(|(k, _)| k.starts_with(prefix)) {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// How convolution kernels are drawn.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum WeightInit {
    /// normal(0, std) for every kernel.
    Normal { std: f64 },
    /// normal(0, gain / sqrt(fan_in)), keeping activations at a usable
    /// scale through deep narrow stacks.
    FanIn { gain: f64 },
}

impl WeightInit {
    pub fn std(self, fan_in: usize) -> f64 {
        match self {
            WeightInit::Normal { std } => std,
            WeightInit::FanIn { gain } => gain / (fan_in.max(1) as f64).sqrt(),
        }
    }

    pub fn validate(self) -> Result<()> {
        let v = match self {
            WeightInit::Normal { std } => std,
            WeightInit::FanIn { gain } => gain,
        };
        if v.is_finite() && v > 0.0 {
            Ok(())
        } else {
            Err(Error::Config("weight init scale must be positive".into()))
        }
    }
}

/// Deterministic kernel initializer.
pub struct Initializer {
    rng: ChaCha8Rng,
    scheme: WeightInit,
}

impl Initializer {
    /// normal(0, std) for every kernel.
    pub fn new(seed: u64, std: f64) -> Self {
        Self::with_scheme(seed, WeightInit::Normal { std })
    }

    pub fn with_scheme(seed: u64, scheme: WeightInit) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            scheme,
        }
    }

    /// Kernel of `shape` whose outputs each sum `fan_in` weighted inputs.
    pub fn kernel(&mut self, shape: [usize; 3], fan_in: usize) -> Tensor {
        let std = self.scheme.std(fan_in);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| std * Distribution::<f64>::sample(&StandardNormal, &mut self.rng)).collect())
    }
}

/// Maps parameter names onto graph leaves for one forward pass. Frozen
/// parameters become constants and never receive gradient.
pub struct Binder<'a> {
    store: &'a ParamStore,
    frozen: Vec<String>,
    vars: HashMap<String, Var>,
}

impl<'a> Binder<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self {
            store,
            frozen: Vec::new(),
            vars: HashMap::new(),
        }
    }

    /// Treat every parameter whose name starts with `prefix` as constant.
    pub fn freeze_prefix(mut self, prefix: impl Into<String>) -> Self {
        self.frozen.push(prefix.into());
        self
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.iter().any(|p| name.starts_with(p.as_str()))
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn var(&mut self, g: &mut Graph, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let value = self.store.get(name)?.clone();
        let v = if self.is_frozen(name) { g.constant(value) } else { g.leaf(value) };
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    /// Gradient for every bound, trainable parameter (zeros where the loss
    /// did not reach it).
    pub fn gradients(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .filter(|(name, _)| !self.is_frozen(name))
            .map(|(name, &v)| {
                let g = grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(self.store.params[name].shape()));
                (name.clone(), g)
            })
            .collect()
    }

    pub fn bound_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.vars.keys().cloned().collect();
        names.sort();
        names
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Left-only padding; streamable.
    Causal,
    /// Symmetric zero padding of the given width.
    Same(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightParam {
    Plain,
    /// `weight = g · v / ‖v‖` per output channel.
    WeightNorm,
    /// Weight divided by its largest singular value (one power iteration
    /// per forward, vector state stored as `{name}.sn_u`).
    SpectralNorm,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv1d {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub groups: usize,
    pub padding: Padding,
    pub param: WeightParam,
}

impl Conv1d {
    pub fn causal(name: impl Into<String>, in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self {
            name: name.into(),
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            dilation: 1,
            groups: 1,
            padding: Padding::Causal,
            param: WeightParam::Plain,
        }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }

    pub fn groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn padding(mut self, padding: Padding) -> Self {
        self.padding = padding;
        self
    }

    pub fn param(mut self, param: WeightParam) -> Self {
        self.param = param;
        self
    }

    pub fn weight_shape(&self) -> [usize; 3] {
        [self.out_channels, self.in_channels / self.groups, self.kernel]
    }

    /// Input samples of history a streaming step must retain.
    pub fn history_len(&self) -> usize {
        ((self.kernel - 1) * self.dilation).saturating_sub(self.stride - 1)
    }

    pub fn geometry(&self, len: usize) -> ConvGeometry {
        match self.padding {
            Padding::Causal => ConvGeometry::causal(len, self.stride, self.dilation, self.groups),
            Padding::Same(p) => ConvGeometry::padded(len, self.kernel, self.stride, self.dilation, self.groups, p),
        }
    }

    fn init(&self, store: &mut ParamStore, init: &mut Initializer) {
        let shape = self.weight_shape();
        let w = init.kernel(shape, shape[1] * shape[2]);
        match self.param {
            WeightParam::Plain => store.insert(format!("{}.weight", self.name), w),
            WeightParam::WeightNorm => {
                let mut g = Tensor::zeros([shape[0], 1, 1]);
                let per = shape[1] * shape[2];
                for o in 0..shape[0] {
                    g.data_mut()[o] = w.data()[o * per..(o + 1) * per].iter().map(|x| x * x).sum::<f64>().sqrt();
                }
                store.insert(format!("{}.weight_v", self.name), w);
                store.insert(format!("{}.weight_g", self.name), g);
            }
            WeightParam::SpectralNorm => {
                let u = Tensor::full([1, 1, shape[0]], 1.0 / (shape[0] as f64).sqrt());
                store.insert(format!("{}.weight", self.name), w);
                store.insert(format!("{}.sn_u", self.name), u);
            }
        }
        store.insert(format!("{}.bias", self.name), Tensor::zeros([1, self.out_channels, 1]));
    }

    fn weight_var(&self, g: &mut Graph, binder: &mut Binder) -> Result<Var> {
        match self.param {
            WeightParam::Plain => binder.var(g, &format!("{}.weight", self.name)),
            WeightParam::WeightNorm => {
                let v = binder.var(g, &format!("{}.weight_v", self.name))?;
                let gain = binder.var(g, &format!("{}.weight_g", self.name))?;
                Ok(g.weight_norm(v, gain))
            }
            WeightParam::SpectralNorm => {
                let w = binder.var(g, &format!("{}.weight", self.name))?;
                let u0 = binder.store().get(&format!("{}.sn_u", self.name))?.data().to_vec();
                let (u, v) = power_iteration(g.value(w), &u0);
                Ok(g.spectral_norm(w, u, v))
            }
        }
    }

    pub fn forward_graph(&self, g: &mut Graph, binder: &mut Binder, x: Var) -> Result<Var> {
        let w = self.weight_var(g, binder)?;
        let b = binder.var(g, &format!("{}.bias", self.name))?;
        self.check_input(g.value(x))?;
        let geo = self.geometry(g.value(x).len());
        Ok(g.conv(x, w, Some(b), geo))
    }

    /// Effective (reparametrized) weight and bias.
    pub fn resolve(&self, store: &ParamStore) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let mut binder = Binder::new(store);
        let w = self.weight_var(&mut g, &mut binder)?;
        let weight = g.value(w).clone();
        if weight.shape() != self.weight_shape() {
            return Err(Error::Shape(format!(
                "{}: weight shape {:?}, expected {:?}",
                self.name,
                weight.shape(),
                self.weight_shape()
            )));
        }
        Ok((weight, store.get(&format!("{}.bias", self.name))?.clone()))
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.channels() != self.in_channels {
            return Err(Error::Shape(format!(
                "{}: input has {} channels, expected {}",
                self.name,
                x.channels(),
                self.in_channels
            )));
        }
        Ok(())
    }
}

/// One power-iteration step from `u0`; returns normalized `(u, v)`.
pub fn power_iteration(w: &Tensor, u0: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let [o, i, k] = w.shape();
    let cols = i * k;
    let normalize = |x: &mut Vec<f64>| {
        let n = x.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
        x.iter_mut().for_each(|a| *a /= n);
    };
    let mut v = vec![0.0; cols];
    for r in 0..o {
        for c in 0..cols {
            v[c] += w.data()[r * cols + c] * u0[r];
        }
    }
    normalize(&mut v);
    let mut u: Vec<f64> = (0..o)
        .map(|r| w.data()[r * cols..(r + 1) * cols].iter().zip(&v).map(|(a, b)| a * b).sum())
        .collect();
    normalize(&mut u);
    (u, v)
}

/// Causal transposed convolution with kernel `2·stride` by default; the
/// right tail is trimmed (zero lookahead).
#[derive(Clone, Debug, PartialEq)]
pub struct ConvTranspose1d {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvTranspose1d {
    pub fn new(name: impl Into<String>, in_channels: usize, out_channels: usize, stride: usize) -> Self {
        Self {
            name: name.into(),
            in_channels,
            out_channels,
            kernel: 2 * stride,
            stride,
        }
    }

    pub fn weight_shape(&self) -> [usize; 3] {
        [self.in_channels, self.out_channels, self.kernel]
    }

    pub fn carry_len(&self) -> usize {
        self.kernel.saturating_sub(self.stride)
    }

    fn init(&self, store: &mut ParamStore, init: &mut Initializer) {
        let fan_in = self.in_channels * self.kernel.div_ceil(self.stride);
        store.insert(format!("{}.weight", self.name), init.kernel(self.weight_shape(), fan_in));
        store.insert(format!("{}.bias", self.name), Tensor::zeros([1, self.out_channels, 1]));
    }

    pub fn forward_graph(&self, g: &mut Graph, binder: &mut Binder, x: Var) -> Result<Var> {
        let w = binder.var(g, &format!("{}.weight", self.name))?;
        let b = binder.var(g, &format!("{}.bias", self.name))?;
        if g.value(x).channels() != self.in_channels {
            return Err(Error::Shape(format!("{}: channel mismatch", self.name)));
        }
        let geo = ConvGeometry::causal_transposed(g.value(x).len(), self.stride);
        Ok(g.conv_transpose(x, w, Some(b), geo))
    }

    pub fn resolve(&self, store: &ParamStore) -> Result<(Tensor, Tensor)> {
        let w = store.get(&format!("{}.weight", self.name))?.clone();
        if w.shape() != self.weight_shape() {
            return Err(Error::Shape(format!("{}: weight shape {:?}", self.name, w.shape())));
        }
        Ok((w, store.get(&format!("{}.bias", self.name))?.clone()))
    }
}

/// A layer tree. Every block maps a `[B, C, T]` input to a `[B, C', T']`
/// output with `T'` determined by strides alone.
#[derive(Clone, Debug, PartialEq)]
pub enum Block {
    Conv(Conv1d),
    ConvTranspose(ConvTranspose1d),
    Act(Activation),
    Tanh,
    /// `x + f(x)`.
    Residual(Vec<Block>),
    /// Mean of the branch outputs.
    Branches(Vec<Vec<Block>>),
    /// Tile the channels `n` times.
    Repeat(usize),
    /// Average `n` channel groups.
    GroupMean(usize),
}

/// A block tree bound to its parameter names.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub blocks: Vec<Block>,
}

impl Network {
    pub fn new(blocks: Vec<Block>) -> Self {
        Self { blocks }
    }

    pub fn init(&self, store: &mut ParamStore, init: &mut Initializer) {
        visit(&self.blocks, &mut |b| match b {
            Block::Conv(c) => c.init(store, init),
            Block::ConvTranspose(c) => c.init(store, init),
            _ => {}
        });
    }

    pub fn convs(&self) -> Vec<Conv1d> {
        let mut out = Vec::new();
        visit(&self.blocks, &mut |b| {
            if let Block::Conv(c) = b {
                out.push(c.clone());
            }
        });
        out
    }

    pub fn forward_graph(&self, g: &mut Graph, binder: &mut Binder, x: Var) -> Result<Var> {
        graph_blocks(&self.blocks, g, binder, x)
    }

    pub fn compile(&self, store: &ParamStore) -> Result<CompiledNetwork> {
        Ok(CompiledNetwork {
            blocks: compile_blocks(&self.blocks, store)?,
        })
    }
}

fn visit(blocks: &[Block], f: &mut impl FnMut(&Block)) {
    for b in blocks {
        f(b);
        match b {
            Block::Residual(inner) => visit(inner, f),
            Block::Branches(branches) => branches.iter().for_each(|br| visit(br, f)),
            _ => {}
        }
    }
}

fn graph_blocks(blocks: &[Block], g: &mut Graph, binder: &mut Binder, mut x: Var) -> Result<Var> {
    for block in blocks {
        x = match block {
            Block::Conv(c) => c.forward_graph(g, binder, x)?,
            Block::ConvTranspose(c) => c.forward_graph(g, binder, x)?,
            Block::Act(a) => g.unary(x, a.unary()),
            Block::Tanh => g.unary(x, Unary::Tanh),
            Block::Residual(inner) => {
                let y = graph_blocks(inner, g, binder, x)?;
                g.add(x, y)
            }
            Block::Branches(branches) => {
                let outs = branches
                    .iter()
                    .map(|br| graph_blocks(br, g, binder, x))
                    .collect::<Result<Vec<_>>>()?;
                let sum = g.sum_all(&outs);
                g.scale(sum, 1.0 / branches.len() as f64)
            }
            Block::Repeat(n) => g.repeat_channels(x, *n),
            Block::GroupMean(n) => g.group_mean(x, *n),
        };
    }
    Ok(x)
}

#[derive(Clone, Debug)]
enum CompiledBlock {
    Conv {
        spec: Conv1d,
        weight: Tensor,
        bias: Tensor,
    },
    ConvTranspose {
        spec: ConvTranspose1d,
        weight: Tensor,
        bias: Tensor,
    },
    Unary(Unary),
    Residual(Vec<CompiledBlock>),
    Branches(Vec<Vec<CompiledBlock>>),
    Repeat(usize),
    GroupMean(usize),
}

fn compile_blocks(blocks: &[Block], store: &ParamStore) -> Result<Vec<CompiledBlock>> {
    blocks
        .iter()
        .map(|b| {
            Ok(match b {
                Block::Conv(c) => {
                    let (weight, bias) = c.resolve(store)?;
                    CompiledBlock::Conv {
                        spec: c.clone(),
                        weight,
                        bias,
                    }
                }
                Block::ConvTranspose(c) => {
                    let (weight, bias) = c.resolve(store)?;
                    CompiledBlock::ConvTranspose {
                        spec: c.clone(),
                        weight,
                        bias,
                    }
                }
                Block::Act(a) => CompiledBlock::Unary(a.unary()),
                Block::Tanh => CompiledBlock::Unary(Unary::Tanh),
                Block::Residual(inner) => CompiledBlock::Residual(compile_blocks(inner, store)?),
                Block::Branches(brs) => CompiledBlock::Branches(
                    brs.iter().map(|br| compile_blocks(br, store)).collect::<Result<_>>()?,
                ),
                Block::Repeat(n) => CompiledBlock::Repeat(*n),
                Block::GroupMean(n) => CompiledBlock::GroupMean(*n),
            })
        })
        .collect()
}

/// Per-layer causal history for chunked inference, in tree traversal order.
#[derive(Clone, Debug, PartialEq)]
pub struct NetState {
    buffers: Vec<Tensor>,
}

impl NetState {
    pub fn buffers(&self) -> &[Tensor] {
        &self.buffers
    }
}

/// A network with weights resolved, for inference.
#[derive(Clone, Debug)]
pub struct CompiledNetwork {
    blocks: Vec<CompiledBlock>,
}

impl CompiledNetwork {
    pub fn forward(&self, x: &Tensor) -> Tensor {
        infer_blocks(&self.blocks, x.clone())
    }

    /// Zero history: equivalent to the left zero padding of batch inference.
    pub fn init_state(&self, batch: usize) -> NetState {
        let mut buffers = Vec::new();
        fn walk(blocks: &[CompiledBlock], batch: usize, out: &mut Vec<Tensor>) {
            for b in blocks {
                match b {
                    CompiledBlock::Conv { spec, .. } => {
                        out.push(Tensor::zeros([batch, spec.in_channels, spec.history_len()]))
                    }
                    CompiledBlock::ConvTranspose { spec, .. } => {
                        out.push(Tensor::zeros([batch, spec.out_channels, spec.carry_len()]))
                    }
                    CompiledBlock::Residual(inner) => walk(inner, batch, out),
                    CompiledBlock::Branches(brs) => brs.iter().for_each(|br| walk(br, batch, out)),
                    _ => {}
                }
            }
        }
        walk(&self.blocks, batch, &mut buffers);
        NetState { buffers }
    }

    /// Processes one chunk. Every strided layer must receive a multiple of
    /// its stride; the caller aligns chunk boundaries.
    pub fn forward_stream(&self, state: &mut NetState, x: &Tensor) -> Tensor {
        let mut cursor = 0;
        let y = stream_blocks(&self.blocks, &mut state.buffers, &mut cursor, x.clone());
        debug_assert_eq!(cursor, state.buffers.len());
        y
    }

    /// Total downsampling (input samples per output step) of strided convs,
    /// and total upsampling of transposed convs.
    pub fn rate_change(&self) -> (usize, usize) {
        let (mut down, mut up) = (1, 1);
        fn walk(blocks: &[CompiledBlock], down: &mut usize, up: &mut usize) {
            for b in blocks {
                match b {
                    CompiledBlock::Conv { spec, .. } => *down *= spec.stride,
                    CompiledBlock::ConvTranspose { spec, .. } => *up *= spec.stride,
                    _ => {}
                }
            }
        }
        walk(&self.blocks, &mut down, &mut up);
        (down, up)
    }
}

fn infer_blocks(blocks: &[CompiledBlock], mut x: Tensor) -> Tensor {
    for block in blocks {
        x = match block {
            CompiledBlock::Conv { spec, weight, bias } => {
                tensor::conv1d(&x, weight, Some(bias), &spec.geometry(x.len()))
            }
            CompiledBlock::ConvTranspose { spec, weight, bias } => {
                tensor::conv_transpose1d(&x, weight, Some(bias), &ConvGeometry::causal_transposed(x.len(), spec.stride))
            }
            CompiledBlock::Unary(f) => x.map(|v| f.apply(v)),
            CompiledBlock::Residual(inner) => {
                let mut y = infer_blocks(inner, x.clone());
                y.add_assign(&x);
                y
            }
            CompiledBlock::Branches(brs) => mean_of(brs.iter().map(|br| infer_blocks(br, x.clone()))),
            CompiledBlock::Repeat(n) => repeat(&x, *n),
            CompiledBlock::GroupMean(n) => group_mean(&x, *n),
        };
    }
    x
}

fn stream_blocks(blocks: &[CompiledBlock], state: &mut [Tensor], cursor: &mut usize, mut x: Tensor) -> Tensor {
    for block in blocks {
        x = match block {
            CompiledBlock::Conv { spec, weight, bias } => {
                let hist = &mut state[*cursor];
                *cursor += 1;
                assert_eq!(x.len() % spec.stride, 0, "{}: chunk not stride aligned", spec.name);
                let h = hist.len();
                let ext = Tensor::cat_time(&[hist, &x]);
                let geo = ConvGeometry {
                    stride: spec.stride,
                    dilation: spec.dilation,
                    groups: spec.groups,
                    shift: (h + spec.stride - 1) as isize,
                    out_len: x.len() / spec.stride,
                };
                let y = tensor::conv1d(&ext, weight, Some(bias), &geo);
                *hist = ext.narrow_time(ext.len() - h, ext.len());
                y
            }
            CompiledBlock::ConvTranspose { spec, weight, bias } => {
                let carry = &mut state[*cursor];
                *cursor += 1;
                let emit = x.len() * spec.stride;
                let geo = ConvGeometry {
                    out_len: emit + carry.len(),
                    ..ConvGeometry::causal_transposed(x.len(), spec.stride)
                };
                let mut full = tensor::conv_transpose1d(&x, weight, None, &geo);
                let [b, c, _] = full.shape();
                for bi in 0..b {
                    for ci in 0..c {
                        let bv = bias.data()[ci];
                        let prev = carry.row(bi, ci).to_vec();
                        let row = full.row_mut(bi, ci);
                        for (r, p) in row.iter_mut().zip(&prev) {
                            *r += p;
                        }
                        row[..emit].iter_mut().for_each(|r| *r += bv);
                    }
                }
                *carry = full.narrow_time(emit, full.len());
                full.narrow_time(0, emit)
            }
            CompiledBlock::Unary(f) => x.map(|v| f.apply(v)),
            CompiledBlock::Residual(inner) => {
                let mut y = stream_blocks(inner, state, cursor, x.clone());
                y.add_assign(&x);
                y
            }
            CompiledBlock::Branches(brs) => {
                let outs: Vec<Tensor> = brs.iter().map(|br| stream_blocks(br, state, cursor, x.clone())).collect();
                mean_of(outs.into_iter())
            }
            CompiledBlock::Repeat(n) => repeat(&x, *n),
            CompiledBlock::GroupMean(n) => group_mean(&x, *n),
        };
    }
    x
}

fn mean_of(mut outs: impl Iterator<Item = Tensor>) -> Tensor {
    let mut acc = outs.next().expect("at least one branch");
    let mut n = 1.0;
    for o in outs {
        acc.add_assign(&o);
        n += 1.0;
    }
    acc.map(|v| v * (1.0 / n))
}

fn repeat(x: &Tensor, n: usize) -> Tensor {
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let r = g.repeat_channels(v, n);
    g.value(r).clone()
}

fn group_mean(x: &Tensor, n: usize) -> Tensor {
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let r = g.group_mean(v, n);
    g.value(r).clone()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_network() -> Network {
        Network::new(vec![
            Block::Conv(Conv1d::causal("a", 1, 4, 5)),
            Block::Residual(vec![
                Block::Act(Activation::LeakyRelu { slope: 0.2 }),
                Block::Conv(Conv1d::causal("r.c0", 4, 4, 3).dilation(3)),
                Block::Act(Activation::Elu),
                Block::Conv(Conv1d::causal("r.c1", 4, 4, 1)),
            ]),
            Block::Conv(Conv1d::causal("down", 4, 6, 6).stride(3)),
            Block::Branches(vec![
                vec![Block::Conv(Conv1d::causal("b0", 6, 6, 3))],
                vec![Block::Conv(Conv1d::causal("b1", 6, 6, 7))],
            ]),
            Block::ConvTranspose(ConvTranspose1d::new("up", 6, 3, 3)),
            Block::Repeat(2),
            Block::Residual(vec![Block::Conv(Conv1d::causal("g", 6, 6, 3).groups(2))]),
            Block::GroupMean(2),
            Block::Tanh,
        ])
    }

    fn params(net: &Network) -> ParamStore {
        let mut store = ParamStore::new();
        net.init(&mut store, &mut Initializer::new(3, 0.4));
        store
    }

    fn signal(len: usize) -> Tensor {
        Tensor::signal(&(0..len).map(|i| ((i * 37 % 23) as f64 / 11.0 - 1.0) * 0.5).collect::<Vec<_>>())
    }

    #[test]
    fn graph_and_inference_paths_agree() {
        let net = toy_network();
        let store = params(&net);
        let x = signal(60);
        let mut g = Graph::new();
        let mut binder = Binder::new(&store);
        let xv = g.constant(x.clone());
        let y = net.forward_graph(&mut g, &mut binder, xv).unwrap();
        let z = net.compile(&store).unwrap().forward(&x);
        assert_eq!(g.value(y).shape(), [1, 3, 60]);
        assert!(g.value(y).max_abs_diff(&z) < 1e-12);
    }

    #[test]
    fn streaming_matches_batch_for_any_aligned_chunking() {
        let net = toy_network();
        let store = params(&net);
        let compiled = net.compile(&store).unwrap();
        let x = signal(90);
        let batch = compiled.forward(&x);
        for sizes in [vec![3usize; 30], vec![9, 3, 30, 6, 42], vec![90]] {
            let mut state = compiled.init_state(1);
            let mut parts = Vec::new();
            let mut at = 0;
            for s in sizes {
                parts.push(compiled.forward_stream(&mut state, &x.narrow_time(at, at + s)));
                at += s;
            }
            let refs: Vec<&Tensor> = parts.iter().collect();
            let streamed = Tensor::cat_time(&refs);
            assert!(streamed.max_abs_diff(&batch) < 1e-12);
        }
    }

    #[test]
    fn frozen_parameters_get_no_gradient() {
        let net = toy_network();
        let store = params(&net);
        let mut g = Graph::new();
        let mut binder = Binder::new(&store).freeze_prefix("r.");
        let xv = g.constant(signal(30));
        let y = net.forward_graph(&mut g, &mut binder, xv).unwrap();
        let l = g.mean(y);
        let grads = g.backward(l);
        let named = binder.gradients(&grads);
        assert!(named.keys().all(|k| !k.starts_with("r.")));
        assert!(named["a.weight"].data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn weight_norm_resolves_to_plain_init() {
        let conv = Conv1d::causal("w", 2, 3, 3).param(WeightParam::WeightNorm);
        let mut store = ParamStore::new();
        conv.init(&mut store, &mut Initializer::new(1, 1.0));
        let (w, _) = conv.resolve(&store).unwrap();
        assert!(w.max_abs_diff(store.get("w.weight_v").unwrap()) < 1e-12);
    }

    #[test]
    fn hash_changes_with_values() {
        let net = toy_network();
        let mut store = params(&net);
        let before = store.hash_prefix("r.");
        assert_eq!(before, store.hash_prefix("r."));
        store.get_mut("a.bias").unwrap().data_mut()[0] = 1.0;
        assert_eq!(before, store.hash_prefix("r."));
        store.get_mut("r.c0.bias").unwrap().data_mut()[0] = 1.0;
        assert_ne!(before, store.hash_prefix("r."));
    }
}
