//! Spiking self-attention and the float attention-map variants it is
//! compared against.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Forward, Linear, ParamId, ParamStore, SpikeMode};
use crate::neuron::{Lif, LifConfig};
use crate::profiler::{LayerRecord, OpKind};
use crate::tensor::kernels::gemm;
use crate::tensor::{
    event_accumulations, matmul_accum_spike, matmul_spike, matmul_spike_accum, AccumTensor, CustomOp, DenseTensor,
    SpikeTensor, Var,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AttentionVariant {
    /// Binary Q, K, V; multiplication-free product, no softmax.
    #[default]
    Ssa,
    /// Float Q, K, V with softmax.
    Vsa,
    /// Raw float product of Q and K.
    Identity,
    Relu,
    LeakyRelu,
    /// Softmax map over float Q, K applied to spike V.
    Softmax,
}

impl AttentionVariant {
    pub const ALL: [AttentionVariant; 6] = [
        AttentionVariant::Ssa,
        AttentionVariant::Vsa,
        AttentionVariant::Identity,
        AttentionVariant::Relu,
        AttentionVariant::LeakyRelu,
        AttentionVariant::Softmax,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AttentionVariant::Ssa => "ssa",
            AttentionVariant::Vsa => "vsa",
            AttentionVariant::Identity => "identity",
            AttentionVariant::Relu => "relu",
            AttentionVariant::LeakyRelu => "leaky_relu",
            AttentionVariant::Softmax => "softmax",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "ssa" => AttentionVariant::Ssa,
            "vsa" => AttentionVariant::Vsa,
            "identity" | "i" | "a_i" => AttentionVariant::Identity,
            "relu" | "a_relu" => AttentionVariant::Relu,
            "leaky_relu" | "leakyrelu" | "a_leakyrelu" => AttentionVariant::LeakyRelu,
            "softmax" | "a_softmax" => AttentionVariant::Softmax,
            other => return Err(Error::config(format!("unknown attention variant {other:?}"))),
        })
    }

    fn uses_softmax(self) -> bool {
        matches!(self, AttentionVariant::Vsa | AttentionVariant::Softmax)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ProductOrder {
    /// `(Q K^T) V`
    #[default]
    QkFirst,
    /// `Q (K^T V)`
    KvFirst,
}

pub const LEAKY_SLOPE: f32 = 0.01;
/// Softmax cost per map element: max, subtract, exp, sum, divide, scale.
pub const SOFTMAX_FLOPS_PER_ELEMENT: u64 = 6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub dim: usize,
    pub heads: usize,
    pub scale: f32,
    pub learnable_scale: bool,
    pub variant: AttentionVariant,
    pub order: ProductOrder,
}

impl AttentionConfig {
    pub fn new(dim: usize, heads: usize) -> Self {
        Self { dim, heads, scale: 0.125, learnable_scale: false, variant: AttentionVariant::Ssa, order: ProductOrder::QkFirst }
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::config(format!("dim {} is not divisible by {} heads", self.dim, self.heads)));
        }
        if !(self.scale > 0.0) {
            return Err(Error::config(format!("attention scale must be positive, got {}", self.scale)));
        }
        Ok(())
    }
}

/// Integer attention product of binary `[N, d]` operands for one head and
/// step, evaluated in `order`. Returns the unscaled product and the number of
/// accumulations performed.
pub fn ssa_product(q: &SpikeTensor, k: &SpikeTensor, v: &SpikeTensor, order: ProductOrder) -> Result<(AccumTensor, u64)> {
    let (n, d) = q.matrix_dims()?;
    if k.matrix_dims()? != (n, d) || v.matrix_dims()? != (n, d) {
        return Err(Error::dim(format!("q/k/v shapes {:?} {:?} {:?} differ", q.shape(), k.shape(), v.shape())));
    }
    let kt = k.transpose2d()?;
    Ok(match order {
        ProductOrder::QkFirst => {
            let a = matmul_spike(q, &kt)?;
            let out = matmul_accum_spike(&a, v)?;
            (out, event_accumulations(q, n) + event_accumulations(v, n))
        }
        ProductOrder::KvFirst => {
            let m = matmul_spike(&kt, v)?;
            let out = matmul_spike_accum(q, &m)?;
            (out, event_accumulations(&kt, d) + event_accumulations(q, d))
        }
    })
}

/// Firing counts of one head's binary operands.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AttentionFiring {
    pub nnz_q: u64,
    pub nnz_k: u64,
    pub nnz_v: u64,
}

/// Operation count of one head at one step. SSA counts accumulations driven
/// by nonzero spike operands and needs the observed firing counts; the float
/// variants count FLOPs of the two products plus softmax where used.
pub fn count_attention_ops(cfg: &AttentionConfig, n: usize, d: usize, firing: Option<AttentionFiring>) -> Result<LayerRecord> {
    let rec = LayerRecord::new("attention", OpKind::Attention);
    let (n64, d64) = (n as u64, d as u64);
    Ok(match cfg.variant {
        AttentionVariant::Ssa => {
            let f = firing.ok_or_else(|| Error::usage("SSA op count needs firing counts from a forward pass"))?;
            let sops = match cfg.order {
                ProductOrder::QkFirst => n64 * (f.nnz_q + f.nnz_v),
                ProductOrder::KvFirst => d64 * (f.nnz_k + f.nnz_q),
            };
            rec.with_sops(sops)
        }
        v => {
            let mut flops = 4 * n64 * n64 * d64;
            if v.uses_softmax() {
                flops += SOFTMAX_FLOPS_PER_ELEMENT * n64 * n64;
            }
            let mut r = rec.with_flops(flops);
            r.operand_float_muls = 2 * n64 * n64 * d64;
            r
        }
    })
}

/// Float attention map `[N, N]` for one head of a non-SSA variant.
pub fn attention_map(variant: AttentionVariant, qf: &DenseTensor, kf: &DenseTensor) -> Result<DenseTensor> {
    let act = |t: &DenseTensor| -> DenseTensor {
        let f: fn(f32) -> f32 = match variant {
            AttentionVariant::Relu => |x| x.max(0.0),
            AttentionVariant::LeakyRelu => |x| if x > 0.0 { x } else { LEAKY_SLOPE * x },
            _ => |x| x,
        };
        DenseTensor::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect()).expect("same shape")
    };
    let (q, k) = (act(qf), act(kf));
    let mut m = q.matmul(&k.transpose2d()?)?;
    match variant {
        AttentionVariant::Ssa => return Err(Error::usage("SSA has no float attention map")),
        AttentionVariant::Vsa | AttentionVariant::Softmax => {
            let d = qf.shape()[1] as f32;
            let n = m.shape()[1];
            for row in m.data_mut().chunks_mut(n) {
                row.iter_mut().for_each(|x| *x /= d.sqrt());
                let mx = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                let mut s = 0.0;
                row.iter_mut().for_each(|x| {
                    *x = (*x - mx).exp();
                    s += *x;
                });
                row.iter_mut().for_each(|x| *x /= s);
            }
        }
        _ => {}
    }
    Ok(m)
}

/// Backward of the integer product `Q K^T V` treated as a float product.
struct SpikeProductOp {
    batch: usize,
    n: usize,
    d: usize,
}

impl CustomOp for SpikeProductOp {
    fn name(&self) -> &'static str {
        "spike_attention_product"
    }

    fn backward(&self, g: &[f32], inputs: &[&DenseTensor], _output: &DenseTensor) -> Result<Vec<Option<Vec<f32>>>> {
        let (n, d) = (self.n, self.d);
        let (q, k, v) = (inputs[0].data(), inputs[1].data(), inputs[2].data());
        let mut gq = vec![0.0; self.batch * n * d];
        let mut gk = vec![0.0; self.batch * n * d];
        let mut gv = vec![0.0; self.batch * n * d];
        gq.par_chunks_mut(n * d)
            .zip(gk.par_chunks_mut(n * d))
            .zip(gv.par_chunks_mut(n * d))
            .enumerate()
            .for_each(|(b, ((gq, gk), gv))| {
                let r = b * n * d..(b + 1) * n * d;
                let (q, k, v, g) = (&q[r.clone()], &k[r.clone()], &v[r.clone()], &g[r]);
                let mut a = vec![0.0; n * n];
                gemm(n, d, n, q, false, k, true, &mut a, 0.0);
                // dV = A^T g
                gemm(n, n, d, &a, true, g, false, gv, 0.0);
                // dA = g V^T ; dQ = dA K ; dK = dA^T Q
                let mut ga = vec![0.0; n * n];
                gemm(n, d, n, g, false, v, true, &mut ga, 0.0);
                gemm(n, n, d, &ga, false, k, false, gq, 0.0);
                gemm(n, n, d, &ga, true, q, false, gk, 0.0);
            });
        Ok(vec![Some(gq), Some(gk), Some(gv)])
    }
}

/// Multi-head attention sublayer: projections, map, neuron, output projection.
#[derive(Debug, Clone)]
pub struct SelfAttention {
    pub name: String,
    pub cfg: AttentionConfig,
    pub q: Linear,
    pub q_bn: BatchNorm,
    pub q_lif: Lif,
    pub k: Linear,
    pub k_bn: BatchNorm,
    pub k_lif: Lif,
    pub v: Linear,
    pub v_bn: BatchNorm,
    pub v_lif: Lif,
    pub attn_lif: Lif,
    pub proj: Linear,
    pub proj_bn: BatchNorm,
    pub proj_lif: Lif,
    pub scale: Option<ParamId>,
}

impl SelfAttention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cfg: AttentionConfig, lif: LifConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let sub = |s: &str| format!("{name}.{s}");
        Ok(Self {
            q: Linear::new(store, &sub("q"), d, d, true, rng),
            q_bn: BatchNorm::new(store, &sub("q_bn"), d),
            q_lif: Lif::new(&sub("q_lif"), lif),
            k: Linear::new(store, &sub("k"), d, d, true, rng),
            k_bn: BatchNorm::new(store, &sub("k_bn"), d),
            k_lif: Lif::new(&sub("k_lif"), lif),
            v: Linear::new(store, &sub("v"), d, d, true, rng),
            v_bn: BatchNorm::new(store, &sub("v_bn"), d),
            v_lif: Lif::new(&sub("v_lif"), lif),
            attn_lif: Lif::new(&sub("attn_lif"), lif),
            proj: Linear::new(store, &sub("proj"), d, d, true, rng),
            proj_bn: BatchNorm::new(store, &sub("proj_bn"), d),
            proj_lif: Lif::new(&sub("proj_lif"), lif),
            scale: cfg
                .learnable_scale
                .then(|| store.add_param(&sub("scale"), DenseTensor::full([1], cfg.scale))),
            name: name.to_string(),
            cfg,
        })
    }

    pub fn num_params(&self) -> usize {
        4 * self.q.num_params() + 4 * self.q_bn.num_params() + self.scale.map_or(0, |_| 1)
    }

    /// `[TB, N, D]` tokens to `[TB * H, N, d]` heads.
    fn split_heads(&self, fx: &mut Forward<'_>, x: Var) -> Result<Var> {
        let s = fx.tape.shape(x).to_vec();
        let (h, d) = (self.cfg.heads, self.cfg.head_dim());
        let x = fx.tape.reshape(x, &[s[0], s[1], h, d])?;
        let x = fx.tape.permute(x, &[0, 2, 1, 3])?;
        fx.tape.reshape(x, &[s[0] * h, s[1], d])
    }

    fn merge_heads(&self, fx: &mut Forward<'_>, x: Var, tb: usize, n: usize) -> Result<Var> {
        let (h, d) = (self.cfg.heads, self.cfg.head_dim());
        let x = fx.tape.reshape(x, &[tb, h, n, d])?;
        let x = fx.tape.permute(x, &[0, 2, 1, 3])?;
        fx.tape.reshape(x, &[tb, n, h * d])
    }

    fn branch(&self, fx: &mut Forward<'_>, x: Var, which: usize, steps: usize, spike: bool) -> Result<Var> {
        let (lin, bn, lif) = match which {
            0 => (&self.q, &self.q_bn, &self.q_lif),
            1 => (&self.k, &self.k_bn, &self.k_lif),
            _ => (&self.v, &self.v_bn, &self.v_lif),
        };
        let y = lin.forward(fx, x)?;
        let y = bn.forward_tokens(fx, y)?;
        if spike {
            lif.forward(fx, y, steps)
        } else {
            Ok(y)
        }
    }

    fn spike_product(&self, fx: &mut Forward<'_>, q: Var, k: Var, v: Var) -> Result<Var> {
        let s = fx.tape.shape(q).to_vec();
        let (batch, n, d) = (s[0], s[1], s[2]);
        let pack = |t: &DenseTensor| -> Result<Vec<SpikeTensor>> {
            t.data().chunks(n * d).map(|c| SpikeTensor::from_values([n, d], c)).collect()
        };
        let (qs, ks, vs) = (pack(fx.value(q))?, pack(fx.value(k))?, pack(fx.value(v))?);
        let order = self.cfg.order;
        let parts: Vec<(AccumTensor, u64)> = (0..batch)
            .into_par_iter()
            .map(|b| ssa_product(&qs[b], &ks[b], &vs[b], order))
            .collect::<Result<_>>()?;
        let sops: u64 = parts.iter().map(|p| p.1).sum();
        let data: Vec<f32> = parts.iter().flat_map(|(a, _)| a.data().iter().map(|&x| x as f32)).collect();
        fx.record(LayerRecord::new(format!("{}.product", self.name), OpKind::Attention).with_sops(sops));
        let out = DenseTensor::new([batch, n, d], data)?;
        Ok(fx.tape.custom(&[q, k, v], out, Box::new(SpikeProductOp { batch, n, d }), false))
    }

    fn float_product(&self, fx: &mut Forward<'_>, q: Var, k: Var, v: Var) -> Result<Var> {
        let t = &mut fx.tape;
        Ok(match self.cfg.order {
            ProductOrder::QkFirst => {
                let a = t.batched_matmul(q, k, true)?;
                t.batched_matmul(a, v, false)?
            }
            ProductOrder::KvFirst => {
                let kt = t.permute(k, &[0, 2, 1])?;
                let m = t.batched_matmul(kt, v, false)?;
                t.batched_matmul(q, m, false)?
            }
        })
    }

    fn apply_scale(&self, fx: &mut Forward<'_>, x: Var) -> Result<Var> {
        match self.scale {
            Some(id) => {
                let s = fx.param(id);
                fx.tape.mul_scalar(x, s)
            }
            None => Ok(fx.tape.scale(x, self.cfg.scale)),
        }
    }

    /// `x` is `[steps * B, N, D]`; output has the same shape.
    pub fn forward(&self, fx: &mut Forward<'_>, x: Var, steps: usize) -> Result<Var> {
        let s = fx.tape.shape(x).to_vec();
        if s.len() != 3 || s[2] != self.cfg.dim {
            return Err(Error::dim(format!("{}: expected [TB, N, {}], got {s:?}", self.name, self.cfg.dim)));
        }
        let (tb, n) = (s[0], s[1]);
        let variant = self.cfg.variant;
        let hard = fx.mode == SpikeMode::Hard;
        if variant == AttentionVariant::Ssa && hard {
            let bad = fx.value(x).data().iter().position(|&v| v < 0.0 || v.fract() != 0.0);
            if let Some(i) = bad {
                return Err(Error::Contract(format!("{}: spike input holds non-count value at {i}", self.name)));
            }
        }
        let spike_qk = variant == AttentionVariant::Ssa;
        let spike_v = variant != AttentionVariant::Vsa;
        let q = self.branch(fx, x, 0, steps, spike_qk)?;
        let k = self.branch(fx, x, 1, steps, spike_qk)?;
        let v = self.branch(fx, x, 2, steps, spike_v)?;
        let (q, k, v) = (self.split_heads(fx, q)?, self.split_heads(fx, k)?, self.split_heads(fx, v)?);
        let d = self.cfg.head_dim();
        let mixed = if variant == AttentionVariant::Ssa {
            let raw = if hard { self.spike_product(fx, q, k, v)? } else { self.float_product(fx, q, k, v)? };
            if !hard && fx.counting() {
                let mut rec = LayerRecord::new(format!("{}.product", self.name), OpKind::Attention);
                rec.operand_float_muls = (tb * self.cfg.heads) as u64 * 2 * (n * n * d) as u64;
                fx.record(rec);
            }
            self.apply_scale(fx, raw)?
        } else {
            let (qa, ka) = match variant {
                AttentionVariant::Relu => (fx.tape.relu(q), fx.tape.relu(k)),
                AttentionVariant::LeakyRelu => (fx.tape.leaky_relu(q, LEAKY_SLOPE), fx.tape.leaky_relu(k, LEAKY_SLOPE)),
                _ => (q, k),
            };
            let map = fx.tape.batched_matmul(qa, ka, true)?;
            let out = if variant.uses_softmax() {
                let m = fx.tape.scale(map, 1.0 / (d as f32).sqrt());
                let m = fx.tape.softmax(m);
                fx.tape.batched_matmul(m, v, false)?
            } else {
                let o = fx.tape.batched_matmul(map, v, false)?;
                self.apply_scale(fx, o)?
            };
            if fx.counting() {
                let mut rec = count_attention_ops(&self.cfg, n, d, None)?;
                let copies = (tb * self.cfg.heads) as u64;
                rec.layer = format!("{}.product", self.name);
                rec.flops *= copies;
                rec.operand_float_muls *= copies;
                fx.record(rec);
            }
            out
        };
        let merged = self.merge_heads(fx, mixed, tb, n)?;
        let a = self.attn_lif.forward(fx, merged, steps)?;
        let y = self.proj.forward(fx, a)?;
        let y = self.proj_bn.forward_tokens(fx, y)?;
        self.proj_lif.forward(fx, y, steps)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spikes(shape: [usize; 2], vals: &[u8]) -> SpikeTensor {
        let v: Vec<f32> = vals.iter().map(|&b| b as f32).collect();
        SpikeTensor::from_values(shape, &v).unwrap()
    }

    #[test]
    fn dense_ones_qk_is_32_accumulations() {
        let q = spikes([4, 2], &[1; 8]);
        let cfg = AttentionConfig::new(2, 1);
        let f = AttentionFiring { nnz_q: 8, nnz_k: 8, nnz_v: 0 };
        // QK^T alone is nnz(Q) * N
        let rec = count_attention_ops(&cfg, 4, 2, Some(f)).unwrap();
        assert_eq!(rec.sops, 32);
        assert_eq!(event_accumulations(&q, 4), 32);
    }

    #[test]
    fn zero_input_zero_sops() {
        let z = SpikeTensor::zeros([5, 3]);
        let (out, sops) = ssa_product(&z, &z, &z, ProductOrder::QkFirst).unwrap();
        assert_eq!(sops, 0);
        assert!(out.data().iter().all(|&v| v == 0));
    }

    #[test]
    fn ssa_count_needs_firing() {
        let cfg = AttentionConfig::new(8, 2);
        assert!(matches!(count_attention_ops(&cfg, 4, 4, None), Err(Error::Usage(_))));
    }

    #[test]
    fn kv_first_cheaper_when_tokens_exceed_dim() {
        let (n, d) = (64u64, 16u64);
        let dense = AttentionFiring { nnz_q: n * d, nnz_k: n * d, nnz_v: n * d };
        let mut cfg = AttentionConfig::new(16, 1);
        let qk = count_attention_ops(&cfg, 64, 16, Some(dense)).unwrap().sops;
        cfg.order = ProductOrder::KvFirst;
        let kv = count_attention_ops(&cfg, 64, 16, Some(dense)).unwrap().sops;
        assert_eq!(qk, 2 * n * n * d);
        assert_eq!(kv, 2 * n * d * d);
        assert!(kv < qk);
    }

    #[test]
    fn softmax_map_hand_instances() {
        let q = DenseTensor::new([2, 1], vec![1.0, 0.0]).unwrap();
        // identical keys score every query uniformly
        let k = DenseTensor::new([2, 1], vec![1.0, 1.0]).unwrap();
        let m = attention_map(AttentionVariant::Softmax, &q, &k).unwrap();
        assert!(m.data().iter().all(|&v| (v - 0.5).abs() < 1e-6));
        // distinct keys: row 0 scores [1, 0], row 1 scores [0, 0]
        let k = DenseTensor::new([2, 1], vec![1.0, 0.0]).unwrap();
        let m = attention_map(AttentionVariant::Softmax, &q, &k).unwrap();
        let e = std::f64::consts::E;
        let want = [e / (e + 1.0), 1.0 / (e + 1.0), 0.5, 0.5];
        for (a, b) in m.data().iter().zip(want) {
            assert!((*a as f64 - b).abs() < 1e-6);
        }
        assert_eq!((m.data()[0] * 1000.0).round(), 731.0);
        assert_eq!((m.data()[1] * 1000.0).round(), 269.0);
    }

    #[test]
    fn relu_map_non_negative_and_rows_sum_for_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = crate::nn::trunc_normal(&mut rng, &[6, 4], 1.0);
        let k = crate::nn::trunc_normal(&mut rng, &[6, 4], 1.0);
        let m = attention_map(AttentionVariant::Relu, &q, &k).unwrap();
        assert!(m.data().iter().all(|&v| v >= 0.0));
        let s = attention_map(AttentionVariant::Vsa, &q, &k).unwrap();
        for row in s.data().chunks(6) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn variant_names_round_trip() {
        for v in AttentionVariant::ALL {
            assert_eq!(AttentionVariant::parse(v.as_str()).unwrap(), v);
        }
        assert!(AttentionVariant::parse("cosformer").is_err());
    }

    #[test]
    fn config_validation() {
        assert!(AttentionConfig::new(10, 3).validate().is_err());
        let mut c = AttentionConfig::new(8, 2);
        c.scale = 0.0;
        assert!(c.validate().is_err());
    }
}
