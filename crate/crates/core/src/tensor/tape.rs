//! Define-by-run reverse-mode autodiff.
//!
//! Every op evaluates eagerly and appends a node holding its value and enough
//! context to run its vector-Jacobian product. Inputs always precede their
//! consumers in the arena, so a reverse index sweep is a valid topological
//! order and visits each node once.

use std::fmt;

use crate::error::{Error, Result};

use super::dense::{numel, DenseTensor};
use super::kernels::{self, ConvGeometry};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for ops defined outside this module (neurons, spike
/// attention). `grad_out` has the output's length; the result holds one
/// optional gradient per input, in input order.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;
    fn backward(
        &self,
        grad_out: &[f32],
        inputs: &[&DenseTensor],
        output: &DenseTensor,
    ) -> Result<Vec<Option<Vec<f32>>>>;
}

/// Batch-norm layout: `x[(b * channels + c) * spatial + s]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BnLayout {
    pub batch: usize,
    pub channels: usize,
    pub spatial: usize,
}

#[derive(Debug, Clone)]
pub enum BnStats<'a> {
    /// Normalize with batch statistics over visible positions.
    Batch,
    /// Normalize with externally supplied (running) statistics.
    Fixed { mean: &'a [f32], var: &'a [f32] },
}

/// Batch statistics produced by a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BnBatchStats {
    pub mean: Vec<f32>,
    /// Unbiased variance estimate, for running-stat updates.
    pub var_unbiased: Vec<f32>,
}

struct BnSaved {
    layout: BnLayout,
    mean: Vec<f32>,
    inv_std: Vec<f32>,
    count: Vec<f32>,
    batch_stats: bool,
    mask: Option<Vec<f32>>,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    MulScalar(Var, Var),
    AddBroadcast(Var, Var),
    Iand { residual: Var, new: Var },
    Linear { x: Var, w: Var, b: Option<Var>, rows: usize, k: usize, n: usize },
    BatchedMatMul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize, trans_b: bool },
    Reshape(Var),
    Permute { x: Var, axes: Vec<usize> },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeometry },
    MaxPool { x: Var, argmax: Vec<usize> },
    BatchNorm { x: Var, gamma: Var, beta: Var, saved: Box<BnSaved> },
    Softmax(Var),
    Relu(Var),
    LeakyRelu(Var, f32),
    Gelu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, mean: Vec<f32>, inv_std: Vec<f32> },
    MeanAxis { x: Var, outer: usize, axis: usize, inner: usize },
    GatherRows { x: Var, idx: Vec<Vec<usize>>, row_len: usize },
    ScatterRows { base: Var, src: Var, idx: Vec<Vec<usize>>, row_len: usize },
    Sum(Var),
    CrossEntropy { logits: Var, probs: Vec<f32>, labels: Vec<usize> },
    MaskedMse { pred: Var, target: Vec<f32>, row_weight: Vec<f32>, row_len: usize },
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp> },
}

impl fmt::Debug for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::MulScalar(..) => "mul_scalar",
            Op::AddBroadcast(..) => "add_broadcast",
            Op::Iand { .. } => "iand",
            Op::Linear { .. } => "linear",
            Op::BatchedMatMul { .. } => "bmm",
            Op::Reshape(..) => "reshape",
            Op::Permute { .. } => "permute",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool { .. } => "max_pool",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Softmax(..) => "softmax",
            Op::Relu(..) => "relu",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Gelu(..) => "gelu",
            Op::LayerNorm { .. } => "layer_norm",
            Op::MeanAxis { .. } => "mean_axis",
            Op::GatherRows { .. } => "gather_rows",
            Op::ScatterRows { .. } => "scatter_rows",
            Op::Sum(..) => "sum",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::MaskedMse { .. } => "masked_mse",
            Op::Custom { op, .. } => op.name(),
        };
        f.write_str(name)
    }
}

#[derive(Debug)]
struct Node {
    value: DenseTensor,
    op: Op,
    requires_grad: bool,
    param: Option<usize>,
    spiking: bool,
}

/// Single-writer op arena. Not shared across threads while recording.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn add_into(dst: &mut Option<Vec<f32>>, src: Vec<f32>) {
    match dst {
        Some(d) => d.iter_mut().zip(&src).for_each(|(a, b)| *a += b),
        None => *dst = Some(src),
    }
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)

/// `0.5 * (1 + tanh(u / 2))` without the cancellation for negative `u`.
fn sigmoid(u: f32) -> f32 {
    1.0 / (1.0 + (-u).exp())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: DenseTensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad, param: None, spiking: false });
        Var(self.nodes.len() - 1)
    }

    fn push_spiking(&mut self, value: DenseTensor, op: Op, inputs: &[Var], spiking: bool) -> Var {
        let v = self.push(value, op, inputs);
        self.nodes[v.0].spiking = spiking;
        v
    }

    pub fn leaf(&mut self, value: DenseTensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad, param: None, spiking: false });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: DenseTensor) -> Var {
        self.leaf(value, false)
    }

    /// Leaf bound to an external parameter slot; see [`Tape::leaf_grads`].
    pub fn param_leaf(&mut self, value: DenseTensor, slot: usize, requires_grad: bool) -> Var {
        let v = self.leaf(value, requires_grad);
        self.nodes[v.0].param = Some(slot);
        v
    }

    pub fn value(&self, v: Var) -> &DenseTensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Spiking values are binary or small non-negative integers produced by
    /// neurons and residual joins; the profiler counts SOPs against them.
    pub fn is_spiking(&self, v: Var) -> bool {
        self.nodes[v.0].spiking
    }

    pub fn mark_spiking(&mut self, v: Var) {
        self.nodes[v.0].spiking = true;
    }

    pub fn op_name(&self, v: Var) -> String {
        format!("{:?}", self.nodes[v.0].op)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f32, f32) -> f32) -> DenseTensor {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        DenseTensor::new(va.shape().to_vec(), data).expect("same shape")
    }

    fn map(&self, a: Var, f: impl Fn(f32) -> f32) -> DenseTensor {
        let va = self.value(a);
        DenseTensor::new(va.shape().to_vec(), va.data().iter().map(|&x| f(x)).collect())
            .expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.zip_map(a, b, |x, y| x + y);
        let spiking = self.is_spiking(a) && self.is_spiking(b);
        Ok(self.push_spiking(out, Op::Add(a, b), &[a, b], spiking))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.zip_map(a, b, |x, y| x * y);
        let spiking = self.is_spiking(a) && self.is_spiking(b);
        Ok(self.push_spiking(out, Op::Mul(a, b), &[a, b], spiking))
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Var {
        let out = self.map(a, |x| x * c);
        self.push(out, Op::Scale(a, c), &[a])
    }

    /// `x * s` for a one-element `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::dim(format!("mul_scalar needs a one-element factor, got {:?}", self.shape(s))));
        }
        let c = self.value(s).data()[0];
        let out = self.map(x, |v| v * c);
        Ok(self.push(out, Op::MulScalar(x, s), &[x, s]))
    }

    /// `x + y` where `y`'s shape is a suffix of `x`'s shape.
    pub fn add_broadcast(&mut self, x: Var, y: Var) -> Result<Var> {
        let (sx, sy) = (self.shape(x), self.shape(y));
        if sy.len() > sx.len() || sx[sx.len() - sy.len()..] != *sy {
            return Err(Error::dim(format!("cannot broadcast {sy:?} onto {sx:?}")));
        }
        let yv = self.value(y).data().to_vec();
        let mut out = self.value(x).clone();
        out.data_mut()
            .chunks_mut(yv.len().max(1))
            .for_each(|c| c.iter_mut().zip(&yv).for_each(|(a, b)| *a += b));
        Ok(self.push(out, Op::AddBroadcast(x, y), &[x, y]))
    }

    /// Binary-preserving residual join `(NOT new) AND residual`, evaluated as
    /// `residual * (1 - new)` so it stays differentiable.
    pub fn iand(&mut self, residual: Var, new: Var) -> Result<Var> {
        self.same_shape(residual, new, "iand")?;
        let out = self.zip_map(residual, new, |r, s| r * (1.0 - s));
        let spiking = self.is_spiking(residual) && self.is_spiking(new);
        Ok(self.push_spiking(out, Op::Iand { residual, new }, &[residual, new], spiking))
    }

    /// `x · w + b` over the last axis; `w` is `[k, n]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (k, n) = match self.shape(w) {
            [k, n] => (*k, *n),
            s => return Err(Error::dim(format!("linear weight must be 2-D, got {s:?}"))),
        };
        if xs.last() != Some(&k) {
            return Err(Error::dim(format!("linear input {xs:?} does not end in {k}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [n] {
                return Err(Error::dim(format!("linear bias {:?} != [{n}]", self.shape(b))));
            }
        }
        let rows = numel(&xs) / k.max(1);
        let mut out = vec![0.0; rows * n];
        kernels::gemm(rows, k, n, self.value(x).data(), false, self.value(w).data(), false, &mut out, 0.0);
        if let Some(b) = b {
            let bv = self.value(b).data();
            out.chunks_mut(n).for_each(|r| r.iter_mut().zip(bv).for_each(|(o, b)| *o += b));
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = n;
        let out = DenseTensor::new(shape, out)?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(out, Op::Linear { x, w, b, rows, k, n }, &inputs))
    }

    /// 2-D matmul through the linear op.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a).len() != 2 {
            return Err(Error::dim(format!("matmul expects 2-D lhs, got {:?}", self.shape(a))));
        }
        self.linear(a, b, None)
    }

    /// `[B, M, K] x [B, K, N]`, or `[B, M, K] x [B, N, K]^T` with `trans_b`.
    pub fn batched_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (batch, m, k) = match sa.as_slice() {
            [bt, m, k] => (*bt, *m, *k),
            _ => return Err(Error::dim(format!("bmm lhs must be 3-D, got {sa:?}"))),
        };
        let (bb, k2, n) = match (sb.as_slice(), trans_b) {
            ([bt, kk, n], false) => (*bt, *kk, *n),
            ([bt, n, kk], true) => (*bt, *kk, *n),
            _ => return Err(Error::dim(format!("bmm rhs must be 3-D, got {sb:?}"))),
        };
        if bb != batch || k2 != k {
            return Err(Error::dim(format!("bmm shapes {sa:?} x {sb:?} (trans_b={trans_b})")));
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            kernels::gemm(
                m,
                k,
                n,
                &av[i * m * k..(i + 1) * m * k],
                false,
                &bv[i * k * n..(i + 1) * k * n],
                trans_b,
                &mut out[i * m * n..(i + 1) * m * n],
                0.0,
            );
        }
        let out = DenseTensor::new(vec![batch, m, n], out)?;
        Ok(self.push(out, Op::BatchedMatMul { a, b, batch, m, k, n, trans_b }, &[a, b]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape.to_vec())?;
        let spiking = self.is_spiking(x);
        Ok(self.push_spiking(out, Op::Reshape(x), &[x], spiking))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::dim(format!("invalid permutation {axes:?} for shape {shape:?}")));
        }
        let out = permute_data(self.value(x).data(), &shape, axes);
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let out = DenseTensor::new(out_shape, out)?;
        let spiking = self.is_spiking(x);
        Ok(self.push_spiking(out, Op::Permute { x, axes: axes.to_vec() }, &[x], spiking))
    }

    /// Cross-correlation over `[B, C, H, W]` with weight `[O, C, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let [batch, c, h, wd] = <[usize; 4]>::try_from(xs.as_slice())
            .map_err(|_| Error::dim(format!("conv2d input must be [B,C,H,W], got {xs:?}")))?;
        let [o, c2, kh, kw] = <[usize; 4]>::try_from(ws.as_slice())
            .map_err(|_| Error::dim(format!("conv2d weight must be [O,C,k,k], got {ws:?}")))?;
        if c != c2 || kh != kw {
            return Err(Error::dim(format!("conv2d input {xs:?} vs weight {ws:?}")));
        }
        let geom = ConvGeometry {
            batch,
            in_channels: c,
            height: h,
            width: wd,
            out_channels: o,
            kernel: kh,
            stride,
            padding,
        };
        let (oh, ow) = geom.output_hw().ok_or_else(|| {
            Error::dim(format!("conv2d {h}x{wd} kernel {kh} stride {stride} pad {padding} has no output"))
        })?;
        let bias = b.map(|b| self.value(b).data().to_vec());
        let out = kernels::conv2d_forward(&geom, self.value(x).data(), self.value(w).data(), bias.as_deref());
        let out = DenseTensor::new(vec![batch, o, oh, ow], out)?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(out, Op::Conv2d { x, w, b, geom }, &inputs))
    }

    pub fn max_pool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let [b, c, h, w] = <[usize; 4]>::try_from(xs.as_slice())
            .map_err(|_| Error::dim(format!("max_pool2d expects [B,C,H,W], got {xs:?}")))?;
        if kernel == 0 || stride == 0 || h < kernel || w < kernel || (h - kernel) % stride != 0 || (w - kernel) % stride != 0 {
            return Err(Error::dim(format!("max_pool2d k={kernel} s={stride} incompatible with {h}x{w}")));
        }
        let (out, argmax) = kernels::max_pool2d_forward(self.value(x).data(), [b, c, h, w], kernel, stride);
        let (oh, ow) = ((h - kernel) / stride + 1, (w - kernel) / stride + 1);
        let out = DenseTensor::new(vec![b, c, oh, ow], out)?;
        let spiking = self.is_spiking(x);
        Ok(self.push_spiking(out, Op::MaxPool { x, argmax }, &[x], spiking))
    }

    /// Batch normalization. `mask`, when given, has `batch * spatial`
    /// entries (1 = visible); statistics use visible positions only and
    /// masked outputs are zero.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        layout: BnLayout,
        stats: BnStats<'_>,
        eps: f32,
        mask: Option<&[f32]>,
    ) -> Result<(Var, Option<BnBatchStats>)> {
        let BnLayout { batch, channels, spatial } = layout;
        if self.value(x).numel() != batch * channels * spatial {
            return Err(Error::dim(format!("batch_norm layout {layout:?} vs input {:?}", self.shape(x))));
        }
        if self.shape(gamma) != [channels] || self.shape(beta) != [channels] {
            return Err(Error::dim(format!("batch_norm affine params must be [{channels}]")));
        }
        if let Some(m) = mask {
            if m.len() != batch * spatial {
                return Err(Error::dim(format!("batch_norm mask has {} entries, expected {}", m.len(), batch * spatial)));
            }
        }
        let xv = self.value(x).data();
        let vis = |b: usize, s: usize| mask.map_or(1.0, |m| m[b * spatial + s]);
        let mut count = vec![0.0f32; channels];
        let mut mean = vec![0.0f32; channels];
        let mut inv_std = vec![0.0f32; channels];
        let mut batch_out = None;
        match stats {
            BnStats::Batch => {
                let mut var_u = vec![0.0f32; channels];
                for c in 0..channels {
                    let (mut n, mut sum) = (0.0f64, 0.0f64);
                    for b in 0..batch {
                        for s in 0..spatial {
                            let w = vis(b, s) as f64;
                            n += w;
                            sum += w * xv[(b * channels + c) * spatial + s] as f64;
                        }
                    }
                    let mu = if n > 0.0 { sum / n } else { 0.0 };
                    let mut ss = 0.0f64;
                    for b in 0..batch {
                        for s in 0..spatial {
                            let d = xv[(b * channels + c) * spatial + s] as f64 - mu;
                            ss += vis(b, s) as f64 * d * d;
                        }
                    }
                    let var = if n > 0.0 { ss / n } else { 0.0 };
                    count[c] = n as f32;
                    mean[c] = mu as f32;
                    inv_std[c] = (1.0 / (var + eps as f64).sqrt()) as f32;
                    var_u[c] = if n > 1.0 { (ss / (n - 1.0)) as f32 } else { var as f32 };
                }
                batch_out = Some(BnBatchStats { mean: mean.clone(), var_unbiased: var_u });
            }
            BnStats::Fixed { mean: m, var } => {
                if m.len() != channels || var.len() != channels {
                    return Err(Error::dim("batch_norm running stats do not match channel count"));
                }
                mean.copy_from_slice(m);
                for c in 0..channels {
                    inv_std[c] = 1.0 / (var[c] + eps).sqrt();
                }
            }
        }
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![0.0; xv.len()];
        for b in 0..batch {
            for c in 0..channels {
                for s in 0..spatial {
                    let i = (b * channels + c) * spatial + s;
                    out[i] = if vis(b, s) > 0.0 {
                        (xv[i] - mean[c]) * inv_std[c] * g[c] + bt[c]
                    } else {
                        0.0
                    };
                }
            }
        }
        let out = DenseTensor::new(self.shape(x).to_vec(), out)?;
        let saved = BnSaved {
            layout,
            mean,
            inv_std,
            count,
            batch_stats: batch_out.is_some(),
            mask: mask.map(|m| m.to_vec()),
        };
        let v = self.push(out, Op::BatchNorm { x, gamma, beta, saved: Box::new(saved) }, &[x, gamma, beta]);
        Ok((v, batch_out))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let d = *self.shape(x).last().unwrap_or(&1);
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(d.max(1)) {
            let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut s = 0.0;
            row.iter_mut().for_each(|v| {
                *v = (*v - m).exp();
                s += *v;
            });
            row.iter_mut().for_each(|v| *v /= s);
        }
        self.push(out, Op::Softmax(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.map(x, |v| v.max(0.0));
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f32) -> Var {
        let out = self.map(x, |v| if v > 0.0 { v } else { slope * v });
        self.push(out, Op::LeakyRelu(x, slope), &[x])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.map(x, |v| v * sigmoid(2.0 * GELU_C * (v + 0.044715 * v * v * v)));
        self.push(out, Op::Gelu(x), &[x])
    }

    /// Layer norm over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> Result<Var> {
        let d = *self.shape(x).last().unwrap_or(&1);
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::dim(format!("layer_norm affine params must be [{d}]")));
        }
        let (g, b) = (self.value(gamma).data().to_vec(), self.value(beta).data().to_vec());
        let mut out = self.value(x).clone();
        let rows = out.numel() / d;
        let mut means = Vec::with_capacity(rows);
        let mut inv = Vec::with_capacity(rows);
        for row in out.data_mut().chunks_mut(d) {
            let mu = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v as f64 - mu).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps as f64).sqrt();
            for (j, v) in row.iter_mut().enumerate() {
                *v = ((*v as f64 - mu) * is) as f32 * g[j] + b[j];
            }
            means.push(mu as f32);
            inv.push(is as f32);
        }
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, mean: means, inv_std: inv }, &[x, gamma, beta]))
    }

    /// Mean over one axis; the axis is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim(format!("axis {axis} out of range for {shape:?}")));
        }
        let outer = numel(&shape[..axis]);
        let len = shape[axis];
        let inner = numel(&shape[axis + 1..]);
        let xv = self.value(x).data();
        let mut out = vec![0.0f32; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let src = &xv[(o * len + a) * inner..(o * len + a + 1) * inner];
                out[o * inner..(o + 1) * inner].iter_mut().zip(src).for_each(|(d, s)| *d += s);
            }
        }
        out.iter_mut().for_each(|v| *v /= len as f32);
        let mut out_shape = shape;
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let out = DenseTensor::new(out_shape, out)?;
        Ok(self.push(out, Op::MeanAxis { x, outer, axis: len, inner }, &[x]))
    }

    /// `x` is `[B, N, D]`; selects rows `idx[b]` from each batch item.
    pub fn gather_rows(&mut self, x: Var, idx: &[Vec<usize>]) -> Result<Var> {
        let [b, n, d] = <[usize; 3]>::try_from(self.shape(x))
            .map_err(|_| Error::dim(format!("gather_rows expects [B,N,D], got {:?}", self.shape(x))))?;
        if idx.len() != b {
            return Err(Error::dim(format!("gather_rows: {} index lists for batch {b}", idx.len())));
        }
        let nv = idx.first().map_or(0, Vec::len);
        if idx.iter().any(|r| r.len() != nv || r.iter().any(|&i| i >= n)) {
            return Err(Error::dim("gather_rows: ragged or out-of-range indices"));
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(b * nv * d);
        for (bi, rows) in idx.iter().enumerate() {
            for &r in rows {
                out.extend_from_slice(&xv[(bi * n + r) * d..(bi * n + r + 1) * d]);
            }
        }
        let out = DenseTensor::new(vec![b, nv, d], out)?;
        let spiking = self.is_spiking(x);
        Ok(self.push_spiking(out, Op::GatherRows { x, idx: idx.to_vec(), row_len: d }, &[x], spiking))
    }

    /// Copy of `base` (`[B, N, D]`) with rows `idx[b]` replaced by `src` (`[B, Nv, D]`).
    pub fn scatter_rows(&mut self, base: Var, src: Var, idx: &[Vec<usize>]) -> Result<Var> {
        let [b, n, d] = <[usize; 3]>::try_from(self.shape(base))
            .map_err(|_| Error::dim("scatter_rows base must be [B,N,D]"))?;
        let nv = idx.first().map_or(0, Vec::len);
        if self.shape(src) != [b, nv, d] || idx.len() != b || idx.iter().any(|r| r.len() != nv || r.iter().any(|&i| i >= n)) {
            return Err(Error::dim(format!("scatter_rows src {:?} vs base {:?}", self.shape(src), self.shape(base))));
        }
        let mut out = self.value(base).clone();
        let sv = self.value(src).data().to_vec();
        for (bi, rows) in idx.iter().enumerate() {
            for (j, &r) in rows.iter().enumerate() {
                out.data_mut()[(bi * n + r) * d..(bi * n + r + 1) * d]
                    .copy_from_slice(&sv[(bi * nv + j) * d..(bi * nv + j + 1) * d]);
            }
        }
        Ok(self.push(out, Op::ScatterRows { base, src, idx: idx.to_vec(), row_len: d }, &[base, src]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().map(|&v| v as f64).sum::<f64>() as f32;
        self.push(DenseTensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Mean cross-entropy of `[B, C]` logits against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let [b, c] = <[usize; 2]>::try_from(self.shape(logits))
            .map_err(|_| Error::dim(format!("cross_entropy expects [B,C], got {:?}", self.shape(logits))))?;
        if labels.len() != b || labels.iter().any(|&l| l >= c) {
            return Err(Error::dim("cross_entropy labels do not match logits"));
        }
        let lv = self.value(logits).data();
        let mut probs = vec![0.0f32; b * c];
        let mut loss = 0.0f64;
        for i in 0..b {
            let row = &lv[i * c..(i + 1) * c];
            let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
            let z: f64 = row.iter().map(|&v| (v as f64 - m).exp()).sum();
            for j in 0..c {
                probs[i * c + j] = ((row[j] as f64 - m).exp() / z) as f32;
            }
            loss += z.ln() + m - row[labels[i]] as f64;
        }
        let out = DenseTensor::scalar((loss / b as f64) as f32);
        Ok(self.push(out, Op::CrossEntropy { logits, probs, labels: labels.to_vec() }, &[logits]))
    }

    /// Weighted mean over rows of the per-row mean squared error. `pred` and
    /// `target` share a shape whose last axis is the row length; rows with
    /// zero weight do not contribute.
    pub fn masked_mse(&mut self, pred: Var, target: &DenseTensor, row_weight: &[f32]) -> Result<Var> {
        if self.shape(pred) != target.shape() {
            return Err(Error::dim(format!("masked_mse {:?} vs {:?}", self.shape(pred), target.shape())));
        }
        let row_len = *target.shape().last().unwrap_or(&1);
        let rows = target.numel() / row_len.max(1);
        if row_weight.len() != rows {
            return Err(Error::dim(format!("masked_mse has {} weights for {rows} rows", row_weight.len())));
        }
        let wsum: f64 = row_weight.iter().map(|&w| w as f64).sum();
        let pv = self.value(pred).data();
        let mut total = 0.0f64;
        for r in 0..rows {
            if row_weight[r] == 0.0 {
                continue;
            }
            let se: f64 = pv[r * row_len..(r + 1) * row_len]
                .iter()
                .zip(&target.data()[r * row_len..(r + 1) * row_len])
                .map(|(&p, &t)| (p as f64 - t as f64).powi(2))
                .sum();
            total += row_weight[r] as f64 * se / row_len as f64;
        }
        let loss = if wsum > 0.0 { total / wsum } else { 0.0 };
        let op = Op::MaskedMse { pred, target: target.data().to_vec(), row_weight: row_weight.to_vec(), row_len };
        Ok(self.push(DenseTensor::scalar(loss as f32), op, &[pred]))
    }

    /// Appends a node computed outside this module.
    pub fn custom(&mut self, inputs: &[Var], value: DenseTensor, op: Box<dyn CustomOp>, spiking: bool) -> Var {
        self.push_spiking(value, Op::Custom { inputs: inputs.to_vec(), op }, inputs, spiking)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::usage(format!("backward needs a scalar loss, got shape {:?}", self.shape(loss))));
        }
        if !self.requires_grad(loss) {
            return Err(Error::usage("backward on a tensor detached from every gradient-requiring input"));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Gradients of every parameter-bound leaf, as `(slot, grad)`.
    pub fn leaf_grads<'g>(&self, grads: &'g Gradients) -> Vec<(usize, &'g [f32])> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| Some((n.param?, grads.grads[i].as_deref()?)))
            .collect()
    }

    fn backprop_node(&self, i: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) -> Result<()> {
        let node = &self.nodes[i];
        let mut send = |v: Var, gv: Vec<f32>| {
            if self.nodes[v.0].requires_grad {
                add_into(&mut grads[v.0], gv);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                send(*a, g.iter().zip(bv).map(|(g, y)| g * y).collect());
                send(*b, g.iter().zip(av).map(|(g, x)| g * x).collect());
            }
            Op::Scale(a, c) => send(*a, g.iter().map(|v| v * c).collect()),
            Op::MulScalar(x, s) => {
                let c = self.value(*s).data()[0];
                let xv = self.value(*x).data();
                send(*x, g.iter().map(|v| v * c).collect());
                send(*s, vec![g.iter().zip(xv).map(|(a, b)| a * b).sum()]);
            }
            Op::AddBroadcast(x, y) => {
                send(*x, g.to_vec());
                let n = self.value(*y).numel().max(1);
                let mut gy = vec![0.0; n];
                g.chunks(n).for_each(|c| gy.iter_mut().zip(c).for_each(|(a, b)| *a += b));
                send(*y, gy);
            }
            Op::Iand { residual, new } => {
                let (rv, sv) = (self.value(*residual).data(), self.value(*new).data());
                send(*residual, g.iter().zip(sv).map(|(g, s)| g * (1.0 - s)).collect());
                send(*new, g.iter().zip(rv).map(|(g, r)| -g * r).collect());
            }
            Op::Linear { x, w, b, rows, k, n } => {
                let (rows, k, n) = (*rows, *k, *n);
                if self.requires_grad(*x) {
                    let mut gx = vec![0.0; rows * k];
                    kernels::gemm(rows, n, k, g, false, self.value(*w).data(), true, &mut gx, 0.0);
                    send(*x, gx);
                }
                if self.requires_grad(*w) {
                    let mut gw = vec![0.0; k * n];
                    kernels::gemm(k, rows, n, self.value(*x).data(), true, g, false, &mut gw, 0.0);
                    send(*w, gw);
                }
                if let Some(b) = b {
                    let mut gb = vec![0.0; n];
                    g.chunks(n).for_each(|r| gb.iter_mut().zip(r).for_each(|(a, b)| *a += b));
                    send(*b, gb);
                }
            }
            Op::BatchedMatMul { a, b, batch, m, k, n, trans_b } => {
                let (batch, m, k, n) = (*batch, *m, *k, *n);
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.requires_grad(*a) {
                    let mut ga = vec![0.0; batch * m * k];
                    for i in 0..batch {
                        // dA = dY · B'^T ; B' is [k, n]
                        kernels::gemm(
                            m,
                            n,
                            k,
                            &g[i * m * n..(i + 1) * m * n],
                            false,
                            &bv[i * k * n..(i + 1) * k * n],
                            !*trans_b,
                            &mut ga[i * m * k..(i + 1) * m * k],
                            0.0,
                        );
                    }
                    send(*a, ga);
                }
                if self.requires_grad(*b) {
                    let mut gb = vec![0.0; batch * k * n];
                    for i in 0..batch {
                        let (gy, ai) = (&g[i * m * n..(i + 1) * m * n], &av[i * m * k..(i + 1) * m * k]);
                        let dst = &mut gb[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            // B is [n, k]: dB = dY^T · A
                            kernels::gemm(n, m, k, gy, true, ai, false, dst, 0.0);
                        } else {
                            kernels::gemm(k, m, n, ai, true, gy, false, dst, 0.0);
                        }
                    }
                    send(*b, gb);
                }
            }
            Op::Reshape(x) => send(*x, g.to_vec()),
            Op::Permute { x, axes } => {
                let out_shape = node.value.shape();
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                send(*x, permute_data(g, out_shape, &inverse));
            }
            Op::Conv2d { x, w, b, geom } => {
                let (gx, gw, gb) = kernels::conv2d_backward(
                    geom,
                    self.value(*x).data(),
                    self.value(*w).data(),
                    g,
                    self.requires_grad(*x),
                );
                if let Some(gx) = gx {
                    send(*x, gx);
                }
                send(*w, gw);
                if let Some(b) = b {
                    send(*b, gb);
                }
            }
            Op::MaxPool { x, argmax } => {
                let mut gx = vec![0.0; self.value(*x).numel()];
                for (gi, &src) in g.iter().zip(argmax) {
                    gx[src] += gi;
                }
                send(*x, gx);
            }
            Op::BatchNorm { x, gamma, beta, saved } => {
                let (gx, gg, gb) = bn_backward(saved, self.value(*x).data(), self.value(*gamma).data(), g);
                send(*x, gx);
                send(*gamma, gg);
                send(*beta, gb);
            }
            Op::Softmax(x) => {
                let d = *node.value.shape().last().unwrap_or(&1);
                let y = node.value.data();
                let mut gx = vec![0.0; y.len()];
                for ((gr, yr), dst) in g.chunks(d).zip(y.chunks(d)).zip(gx.chunks_mut(d)) {
                    let dot: f32 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        dst[j] = yr[j] * (gr[j] - dot);
                    }
                }
                send(*x, gx);
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                send(*x, g.iter().zip(xv).map(|(g, &v)| if v > 0.0 { *g } else { 0.0 }).collect());
            }
            Op::LeakyRelu(x, slope) => {
                let xv = self.value(*x).data();
                send(*x, g.iter().zip(xv).map(|(g, &v)| if v > 0.0 { *g } else { g * slope }).collect());
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                let gx = g
                    .iter()
                    .zip(xv)
                    .map(|(g, &v)| {
                        let u = 2.0 * GELU_C * (v + 0.044715 * v * v * v);
                        let (s, s_neg) = (sigmoid(u), sigmoid(-u));
                        let du = 2.0 * GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
                        g * (s + v * s * s_neg * du)
                    })
                    .collect();
                send(*x, gx);
            }
            Op::LayerNorm { x, gamma, beta, mean, inv_std } => {
                let d = self.value(*gamma).numel();
                let (xv, gv) = (self.value(*x).data(), self.value(*gamma).data());
                let mut gx = vec![0.0; xv.len()];
                let mut gg = vec![0.0; d];
                let mut gb = vec![0.0; d];
                for r in 0..xv.len() / d {
                    let xr = &xv[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let (mu, is) = (mean[r], inv_std[r]);
                    let mut sum_dxh = 0.0f32;
                    let mut sum_dxh_xh = 0.0f32;
                    for j in 0..d {
                        let xh = (xr[j] - mu) * is;
                        gg[j] += gr[j] * xh;
                        gb[j] += gr[j];
                        let dxh = gr[j] * gv[j];
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * xh;
                    }
                    for j in 0..d {
                        let xh = (xr[j] - mu) * is;
                        let dxh = gr[j] * gv[j];
                        gx[r * d + j] = is / d as f32 * (d as f32 * dxh - sum_dxh - xh * sum_dxh_xh);
                    }
                }
                send(*x, gx);
                send(*gamma, gg);
                send(*beta, gb);
            }
            Op::MeanAxis { x, outer, axis, inner } => {
                let mut gx = vec![0.0; outer * axis * inner];
                for o in 0..*outer {
                    for a in 0..*axis {
                        for i in 0..*inner {
                            gx[(o * axis + a) * inner + i] = g[o * inner + i] / *axis as f32;
                        }
                    }
                }
                send(*x, gx);
            }
            Op::GatherRows { x, idx, row_len } => {
                let n = self.shape(*x)[1];
                let d = *row_len;
                let mut gx = vec![0.0; self.value(*x).numel()];
                let nv = idx.first().map_or(0, Vec::len);
                for (bi, rows) in idx.iter().enumerate() {
                    for (j, &r) in rows.iter().enumerate() {
                        let src = &g[(bi * nv + j) * d..(bi * nv + j + 1) * d];
                        gx[(bi * n + r) * d..(bi * n + r + 1) * d]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(a, b)| *a += b);
                    }
                }
                send(*x, gx);
            }
            Op::ScatterRows { base, src, idx, row_len } => {
                let n = self.shape(*base)[1];
                let d = *row_len;
                let nv = idx.first().map_or(0, Vec::len);
                let mut gbase = g.to_vec();
                let mut gsrc = vec![0.0; idx.len() * nv * d];
                for (bi, rows) in idx.iter().enumerate() {
                    for (j, &r) in rows.iter().enumerate() {
                        let range = (bi * n + r) * d..(bi * n + r + 1) * d;
                        gsrc[(bi * nv + j) * d..(bi * nv + j + 1) * d].copy_from_slice(&g[range.clone()]);
                        gbase[range].iter_mut().for_each(|v| *v = 0.0);
                    }
                }
                send(*base, gbase);
                send(*src, gsrc);
            }
            Op::Sum(x) => send(*x, vec![g[0]; self.value(*x).numel()]),
            Op::CrossEntropy { logits, probs, labels } => {
                let b = labels.len();
                let c = probs.len() / b;
                let mut gl = probs.clone();
                for (i, &l) in labels.iter().enumerate() {
                    gl[i * c + l] -= 1.0;
                }
                gl.iter_mut().for_each(|v| *v *= g[0] / b as f32);
                send(*logits, gl);
            }
            Op::MaskedMse { pred, target, row_weight, row_len } => {
                let wsum: f32 = row_weight.iter().sum();
                let pv = self.value(*pred).data();
                let mut gp = vec![0.0; pv.len()];
                if wsum > 0.0 {
                    for (r, &w) in row_weight.iter().enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        let c = g[0] * 2.0 * w / (*row_len as f32 * wsum);
                        for j in r * row_len..(r + 1) * row_len {
                            gp[j] = c * (pv[j] - target[j]);
                        }
                    }
                }
                send(*pred, gp);
            }
            Op::Custom { inputs, op } => {
                let vals: Vec<&DenseTensor> = inputs.iter().map(|v| self.value(*v)).collect();
                let gs = op.backward(g, &vals, &node.value)?;
                if gs.len() != inputs.len() {
                    return Err(Error::usage(format!("custom op {} returned {} gradients for {} inputs", op.name(), gs.len(), inputs.len())));
                }
                for (v, gv) in inputs.iter().zip(gs) {
                    if let Some(gv) = gv {
                        send(*v, gv);
                    }
                }
            }
        }
        Ok(())
    }
}

fn bn_backward(s: &BnSaved, x: &[f32], gamma: &[f32], g: &[f32]) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let BnLayout { batch, channels, spatial } = s.layout;
    let vis = |b: usize, sp: usize| s.mask.as_ref().map_or(1.0, |m| m[b * spatial + sp]);
    let mut gx = vec![0.0; x.len()];
    let mut gg = vec![0.0; channels];
    let mut gb = vec![0.0; channels];
    for c in 0..channels {
        let (mu, is) = (s.mean[c] as f64, s.inv_std[c] as f64);
        let n = s.count[c] as f64;
        let visible = || (0..batch).flat_map(move |b| (0..spatial).map(move |sp| (b, sp))).filter(|&(b, sp)| vis(b, sp) != 0.0);
        // The stored mean is rounded; recentring keeps sum(x_hat) at zero.
        let shift = if s.batch_stats && n > 0.0 {
            visible().map(|(b, sp)| x[(b * channels + c) * spatial + sp] as f64 - mu).sum::<f64>() / n
        } else {
            0.0
        };
        let (mut sum_g, mut sum_g_xh) = (0.0f64, 0.0f64);
        for (b, sp) in visible() {
            let i = (b * channels + c) * spatial + sp;
            let xh = (x[i] as f64 - mu - shift) * is;
            sum_g += g[i] as f64;
            sum_g_xh += g[i] as f64 * xh;
        }
        gg[c] = sum_g_xh as f32;
        gb[c] = sum_g as f32;
        let gm = gamma[c] as f64;
        for (b, sp) in visible() {
            let i = (b * channels + c) * spatial + sp;
            let dxh = g[i] as f64 * gm;
            gx[i] = if s.batch_stats && n > 0.0 {
                let xh = (x[i] as f64 - mu - shift) * is;
                (is / n * (n * dxh - gm * sum_g - xh * gm * sum_g_xh)) as f32
            } else {
                (dxh * is) as f32
            };
        }
    }
    (gx, gg, gb)
}

/// Generic axis permutation of row-major data.
pub(crate) fn permute_data(data: &[f32], shape: &[usize], axes: &[usize]) -> Vec<f32> {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    for _ in 0..data.len() {
        let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.push(data[off]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}
