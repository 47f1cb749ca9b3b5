use rand::Rng;

use crate::attention::SelfAttention;
use crate::error::Result;
use crate::nn::{BatchNorm, Forward, Linear, ParamStore};
use crate::neuron::Lif;
use crate::profiler::TraceKind;
use crate::tensor::Var;

use super::config::{ModelConfig, ResidualMode};
use super::LayerInfo;

/// Residual join of `residual` and a sublayer output `new`.
pub fn join(fx: &mut Forward<'_>, residual: Var, new: Var, mode: ResidualMode) -> Result<Var> {
    match mode {
        ResidualMode::Add => fx.tape.add(residual, new),
        ResidualMode::Iand => fx.tape.iand(residual, new),
    }
}

/// Elementwise `(not new) and residual` on binary values.
pub fn iand(residual: bool, new: bool) -> bool {
    !new && residual
}

#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub bn1: BatchNorm,
    pub lif1: Lif,
    pub fc2: Linear,
    pub bn2: BatchNorm,
    pub lif2: Lif,
}

impl Mlp {
    pub fn forward(&self, fx: &mut Forward<'_>, x: Var, steps: usize) -> Result<Var> {
        let h = self.fc1.forward(fx, x)?;
        let h = self.bn1.forward_tokens(fx, h)?;
        let h = self.lif1.forward(fx, h, steps)?;
        let y = self.fc2.forward(fx, h)?;
        let y = self.bn2.forward_tokens(fx, y)?;
        self.lif2.forward(fx, y, steps)
    }

    fn num_params(&self) -> usize {
        self.fc1.num_params() + self.bn1.num_params() + self.fc2.num_params() + self.bn2.num_params()
    }
}

#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub name: String,
    pub attn: SelfAttention,
    pub mlp: Mlp,
    pub residual: ResidualMode,
}

impl EncoderBlock {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let d = cfg.dim;
        let hidden = d * cfg.mlp_ratio;
        let sub = |s: &str| format!("{name}.{s}");
        Ok(Self {
            attn: SelfAttention::new(store, &sub("attn"), cfg.attention(), cfg.lif, rng)?,
            mlp: Mlp {
                fc1: Linear::new(store, &sub("mlp.fc1"), d, hidden, true, rng),
                bn1: BatchNorm::new(store, &sub("mlp.bn1"), hidden),
                lif1: Lif::new(&sub("mlp.lif1"), cfg.lif),
                fc2: Linear::new(store, &sub("mlp.fc2"), hidden, d, true, rng),
                bn2: BatchNorm::new(store, &sub("mlp.bn2"), d),
                lif2: Lif::new(&sub("mlp.lif2"), cfg.lif),
            },
            residual: cfg.residual,
            name: name.to_string(),
        })
    }

    pub fn num_params(&self) -> usize {
        self.attn.num_params() + self.mlp.num_params()
    }

    /// `[steps * B, N, D]` to the same shape.
    pub fn forward(&self, fx: &mut Forward<'_>, x: Var, steps: usize) -> Result<Var> {
        let a = self.attn.forward(fx, x, steps)?;
        let x1 = join(fx, x, a, self.residual)?;
        fx.trace(&format!("{}.attn_join", self.name), TraceKind::Spike, x1);
        let m = self.mlp.forward(fx, x1, steps)?;
        let x2 = join(fx, x1, m, self.residual)?;
        fx.trace(&format!("{}.mlp_join", self.name), TraceKind::Spike, x2);
        Ok(x2)
    }

    pub fn inventory(&self, out: &mut Vec<LayerInfo>) {
        let a = &self.attn;
        for (lin, bn, lif) in [(&a.q, &a.q_bn, &a.q_lif), (&a.k, &a.k_bn, &a.k_lif), (&a.v, &a.v_bn, &a.v_lif)] {
            out.push(LayerInfo::new(&lin.name, "linear"));
            out.push(LayerInfo::new(&bn.name, "batch_norm"));
            out.push(LayerInfo::new(&lif.name, "lif"));
        }
        out.push(LayerInfo::new(&format!("{}.product", a.name), "attention"));
        out.push(LayerInfo::new(&a.attn_lif.name, "lif"));
        out.push(LayerInfo::new(&a.proj.name, "linear"));
        out.push(LayerInfo::new(&a.proj_bn.name, "batch_norm"));
        out.push(LayerInfo::new(&a.proj_lif.name, "lif"));
        let m = &self.mlp;
        out.push(LayerInfo::new(&m.fc1.name, "linear"));
        out.push(LayerInfo::new(&m.bn1.name, "batch_norm"));
        out.push(LayerInfo::new(&m.lif1.name, "lif"));
        out.push(LayerInfo::new(&m.fc2.name, "linear"));
        out.push(LayerInfo::new(&m.bn2.name, "batch_norm"));
        out.push(LayerInfo::new(&m.lif2.name, "lif"));
    }
}
