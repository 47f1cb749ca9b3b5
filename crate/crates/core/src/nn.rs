//! Parameter storage, the per-pass forward context, and basic layers.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::profiler::{ActivationTrace, LayerRecord, OpKind, OpLedger, TraceKind};
use crate::tensor::kernels::ConvGeometry;
use crate::tensor::{BnLayout, BnStats, DenseTensor, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub value: DenseTensor,
    /// Buffers (running statistics) are stored but never optimized.
    pub trainable: bool,
}

/// Named parameters and buffers with their accumulated gradients.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    by_name: HashMap<String, usize>,
    grads: Vec<Option<Vec<f32>>>,
    frozen: Vec<bool>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn insert(&mut self, name: &str, value: DenseTensor, trainable: bool) -> ParamId {
        assert!(!self.by_name.contains_key(name), "duplicate parameter name {name}");
        self.by_name.insert(name.to_string(), self.entries.len());
        self.entries.push(ParamEntry { name: name.to_string(), value, trainable });
        self.grads.push(None);
        self.frozen.push(false);
        ParamId(self.entries.len() - 1)
    }

    pub fn add_param(&mut self, name: &str, value: DenseTensor) -> ParamId {
        self.insert(name, value, true)
    }

    pub fn add_buffer(&mut self, name: &str, value: DenseTensor) -> ParamId {
        self.insert(name, value, false)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &DenseTensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut DenseTensor {
        &mut self.entries[id.0].value
    }

    pub fn by_name(&self, name: &str) -> Option<&DenseTensor> {
        self.id(name).map(|id| self.value(id))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut DenseTensor> {
        let id = self.id(name)?;
        Some(self.value_mut(id))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entries(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn grad(&self, id: ParamId) -> Option<&[f32]> {
        self.grads[id.0].as_deref()
    }

    pub fn accumulate_grad(&mut self, id: ParamId, g: &[f32]) {
        match &mut self.grads[id.0] {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grads[id.0] = Some(g.to_vec()),
        }
    }

    pub fn grad_mut(&mut self, id: ParamId) -> Option<&mut [f32]> {
        self.grads[id.0].as_deref_mut()
    }

    /// Frozen parameters get no gradients and are skipped by optimizers.
    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.frozen[id.0] = frozen;
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.frozen[id.0]
    }

    /// Trainable and not frozen.
    pub fn is_optimized(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable && !self.frozen[id.0]
    }

    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.value.numel()).sum()
    }
}

/// Neuron evaluation mode. `Relaxed` swaps the Heaviside step for its smooth
/// surrogate primitive so the whole network is differentiable, and routes
/// attention through float products.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SpikeMode {
    #[default]
    Hard,
    Relaxed,
}

/// State for one forward pass: the tape, parameter access and optional
/// instrumentation.
pub struct Forward<'s> {
    pub tape: Tape,
    pub store: &'s mut ParamStore,
    pub training: bool,
    pub mode: SpikeMode,
    pub ledger: Option<OpLedger>,
    pub trace: Option<ActivationTrace>,
    /// Replaces every batch-norm momentum for this pass.
    pub bn_momentum: Option<f32>,
    track_grads: bool,
    leaves: HashMap<ParamId, Var>,
}

impl<'s> Forward<'s> {
    pub fn new(store: &'s mut ParamStore, training: bool) -> Self {
        Self {
            tape: Tape::new(),
            store,
            training,
            mode: SpikeMode::Hard,
            ledger: None,
            trace: None,
            bn_momentum: None,
            track_grads: training,
            leaves: HashMap::new(),
        }
    }

    pub fn with_mode(mut self, mode: SpikeMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn with_ledger(mut self) -> Self {
        self.ledger = Some(OpLedger::new());
        self
    }

    pub fn with_trace(mut self) -> Self {
        self.trace = Some(ActivationTrace::new());
        self
    }

    /// Records gradients even in eval mode (BN uses running stats).
    pub fn with_grads(mut self, on: bool) -> Self {
        self.track_grads = on;
        self
    }

    /// Leaf for a stored parameter, created once per pass.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.leaves.get(&id) {
            return v;
        }
        let rg = self.track_grads && self.store.is_optimized(id);
        let v = self.tape.param_leaf(self.store.value(id).clone(), id.0, rg);
        self.leaves.insert(id, v);
        v
    }

    pub fn input(&mut self, value: DenseTensor) -> Var {
        self.tape.constant(value)
    }

    pub fn value(&self, v: Var) -> &DenseTensor {
        self.tape.value(v)
    }

    pub fn record(&mut self, rec: LayerRecord) {
        if let Some(l) = &mut self.ledger {
            l.record(rec);
        }
    }

    pub fn counting(&self) -> bool {
        self.ledger.is_some()
    }

    pub fn trace(&mut self, name: &str, kind: TraceKind, v: Var) {
        if let Some(t) = &mut self.trace {
            t.push(name, kind, self.tape.value(v).clone());
        }
    }

    /// Backpropagates `loss` and adds parameter gradients into the store.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let grads = self.tape.backward(loss)?;
        for (slot, g) in self.tape.leaf_grads(&grads) {
            self.store.accumulate_grad(ParamId(slot), g);
        }
        Ok(())
    }
}

/// Truncated normal at ±2 standard deviations.
pub fn trunc_normal<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f32) -> DenseTensor {
    DenseTensor::from_fn(shape.to_vec(), |_| loop {
        let z: f32 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            break z * std;
        }
    })
}

pub const INIT_STD: f32 = 0.02;

/// Sum of absolute values, the accumulate count of a spike operand.
fn event_count(x: &[f32]) -> u64 {
    x.iter().map(|v| v.abs().round() as u64).sum()
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub name: String,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, bias: bool, rng: &mut R) -> Self {
        let weight = store.add_param(&format!("{name}.weight"), trunc_normal(rng, &[in_dim, out_dim], INIT_STD));
        let bias = bias.then(|| store.add_param(&format!("{name}.bias"), DenseTensor::zeros([out_dim])));
        Self { name: name.to_string(), weight, bias, in_dim, out_dim }
    }

    pub fn num_params(&self) -> usize {
        self.in_dim * self.out_dim + if self.bias.is_some() { self.out_dim } else { 0 }
    }

    pub fn forward(&self, fx: &mut Forward<'_>, x: Var) -> Result<Var> {
        let w = fx.param(self.weight);
        let b = self.bias.map(|b| fx.param(b));
        if fx.counting() {
            let rows = fx.value(x).numel() / self.in_dim.max(1);
            let rec = LayerRecord::new(&self.name, OpKind::Linear);
            let rec = if fx.tape.is_spiking(x) {
                rec.with_sops(event_count(fx.value(x).data()) * self.out_dim as u64)
            } else {
                rec.with_flops(2 * (rows * self.in_dim * self.out_dim) as u64)
            };
            fx.record(rec);
        }
        fx.tape.linear(x, w, b)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub name: String,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = store.add_param(
            &format!("{name}.weight"),
            trunc_normal(rng, &[out_channels, in_channels, kernel, kernel], INIT_STD),
        );
        let bias = bias.then(|| store.add_param(&format!("{name}.bias"), DenseTensor::zeros([out_channels])));
        Self { name: name.to_string(), weight, bias, in_channels, out_channels, kernel, stride, padding }
    }

    pub fn num_params(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel + if self.bias.is_some() { self.out_channels } else { 0 }
    }

    pub fn forward(&self, fx: &mut Forward<'_>, x: Var) -> Result<Var> {
        let w = fx.param(self.weight);
        let b = self.bias.map(|b| fx.param(b));
        let y = fx.tape.conv2d(x, w, b, self.stride, self.padding)?;
        if fx.counting() {
            let xs = fx.tape.shape(x).to_vec();
            let geom = ConvGeometry {
                batch: xs[0],
                in_channels: xs[1],
                height: xs[2],
                width: xs[3],
                out_channels: self.out_channels,
                kernel: self.kernel,
                stride: self.stride,
                padding: self.padding,
            };
            let rec = LayerRecord::new(&self.name, OpKind::Conv);
            let rec = if fx.tape.is_spiking(x) {
                rec.with_sops(conv_event_sops(&geom, fx.value(x).data()))
            } else {
                let (oh, ow) = geom.output_hw().expect("conv ran");
                let macs = geom.batch * self.out_channels * oh * ow * geom.in_channels * self.kernel * self.kernel;
                rec.with_flops(2 * macs as u64)
            };
            fx.record(rec);
        }
        Ok(y)
    }
}

/// Exact accumulate count of a convolution over a spike input: each event
/// contributes once per output channel per kernel tap that reaches it.
pub fn conv_event_sops(g: &ConvGeometry, x: &[f32]) -> u64 {
    let (oh, ow) = g.output_hw().unwrap_or((0, 0));
    let taps = |len: usize, out: usize| -> Vec<u64> {
        (0..len)
            .map(|p| {
                (0..out)
                    .flat_map(|o| (0..g.kernel).map(move |k| (o * g.stride + k) as isize - g.padding as isize))
                    .filter(|&q| q == p as isize)
                    .count() as u64
            })
            .collect()
    };
    let (ty, tx) = (taps(g.height, oh), taps(g.width, ow));
    let mut total = 0u64;
    for (i, &v) in x.iter().enumerate() {
        if v == 0.0 {
            continue;
        }
        let xx = i % g.width;
        let yy = (i / g.width) % g.height;
        total += v.abs().round() as u64 * ty[yy] * tx[xx];
    }
    total * g.out_channels as u64
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub name: String,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
    pub eps: f32,
    pub momentum: f32,
}

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            name: name.to_string(),
            gamma: store.add_param(&format!("{name}.weight"), DenseTensor::full([channels], 1.0)),
            beta: store.add_param(&format!("{name}.bias"), DenseTensor::zeros([channels])),
            running_mean: store.add_buffer(&format!("{name}.running_mean"), DenseTensor::zeros([channels])),
            running_var: store.add_buffer(&format!("{name}.running_var"), DenseTensor::full([channels], 1.0)),
            channels,
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        }
    }

    pub fn num_params(&self) -> usize {
        2 * self.channels
    }

    /// Normalizes `x` viewed as `[batch, channels, spatial]`; `mask` has
    /// `batch * spatial` entries.
    pub fn forward_layout(&self, fx: &mut Forward<'_>, x: Var, layout: BnLayout, mask: Option<&[f32]>) -> Result<Var> {
        let (g, b) = (fx.param(self.gamma), fx.param(self.beta));
        let (y, stats) = if fx.training {
            fx.tape.batch_norm(x, g, b, layout, BnStats::Batch, self.eps, mask)?
        } else {
            let mean = fx.store.value(self.running_mean).data().to_vec();
            let var = fx.store.value(self.running_var).data().to_vec();
            fx.tape.batch_norm(x, g, b, layout, BnStats::Fixed { mean: &mean, var: &var }, self.eps, mask)?
        };
        if let Some(s) = stats {
            let m = fx.bn_momentum.unwrap_or(self.momentum);
            let rm = fx.store.value_mut(self.running_mean).data_mut();
            rm.iter_mut().zip(&s.mean).for_each(|(r, v)| *r = (1.0 - m) * *r + m * v);
            let rv = fx.store.value_mut(self.running_var).data_mut();
            rv.iter_mut().zip(&s.var_unbiased).for_each(|(r, v)| *r = (1.0 - m) * *r + m * v);
        }
        fx.record(LayerRecord::new(&self.name, OpKind::Norm).with_flops(2 * fx.value(x).numel() as u64));
        Ok(y)
    }

    /// Token layout `[.., channels]`: every row is one sample.
    pub fn forward_tokens(&self, fx: &mut Forward<'_>, x: Var) -> Result<Var> {
        let n = fx.value(x).numel();
        if fx.tape.shape(x).last() != Some(&self.channels) {
            return Err(Error::dim(format!("{}: expected last axis {}, got {:?}", self.name, self.channels, fx.tape.shape(x))));
        }
        self.forward_layout(fx, x, BnLayout { batch: n / self.channels, channels: self.channels, spatial: 1 }, None)
    }

    /// Image layout `[B, C, H, W]`, with an optional `[B, H*W]` visibility mask.
    pub fn forward_image(&self, fx: &mut Forward<'_>, x: Var, mask: Option<&[f32]>) -> Result<Var> {
        let s = fx.tape.shape(x).to_vec();
        if s.len() != 4 || s[1] != self.channels {
            return Err(Error::dim(format!("{}: expected [B,{},H,W], got {s:?}", self.name, self.channels)));
        }
        self.forward_layout(fx, x, BnLayout { batch: s[0], channels: s[1], spatial: s[2] * s[3] }, mask)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub name: String,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            name: name.to_string(),
            gamma: store.add_param(&format!("{name}.weight"), DenseTensor::full([dim], 1.0)),
            beta: store.add_param(&format!("{name}.bias"), DenseTensor::zeros([dim])),
            dim,
        }
    }

    pub fn num_params(&self) -> usize {
        2 * self.dim
    }

    pub fn forward(&self, fx: &mut Forward<'_>, x: Var) -> Result<Var> {
        let (g, b) = (fx.param(self.gamma), fx.param(self.beta));
        fx.record(LayerRecord::new(&self.name, OpKind::Norm).with_flops(5 * fx.value(x).numel() as u64));
        fx.tape.layer_norm(x, g, b, 1e-6)
    }
}
