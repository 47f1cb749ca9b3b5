//! Leaky integrate-and-fire neurons with surrogate-gradient backward.
//!
//! Inputs are time-major `[T * B, ...]`; the layer views them as `[T, rest]`
//! and runs the recurrence independently for every element of `rest`.

use std::f32::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Forward, SpikeMode};
use crate::profiler::{LayerRecord, OpKind, TraceKind};
use crate::tensor::{CustomOp, DenseTensor, SpikeTensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ResetMode {
    #[default]
    Hard,
    /// Subtract the threshold instead of clamping to the reset value.
    Soft,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LifConfig {
    pub tau: f32,
    pub v_threshold: f32,
    pub v_reset: f32,
    pub surrogate_alpha: f32,
    pub reset_mode: ResetMode,
    /// Treat the reset branch as a constant in the backward pass.
    pub detach_reset: bool,
}

impl Default for LifConfig {
    fn default() -> Self {
        Self { tau: 2.0, v_threshold: 1.0, v_reset: 0.0, surrogate_alpha: 2.0, reset_mode: ResetMode::Hard, detach_reset: true }
    }
}

impl LifConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 1.0) {
            return Err(Error::config(format!("tau must exceed 1, got {}", self.tau)));
        }
        if !(self.surrogate_alpha > 0.0) {
            return Err(Error::config(format!("surrogate alpha must be positive, got {}", self.surrogate_alpha)));
        }
        if !self.v_threshold.is_finite() || !self.v_reset.is_finite() {
            return Err(Error::config("threshold and reset must be finite"));
        }
        Ok(())
    }

    /// Smooth step: `arctan(pi/2 * alpha * x) / pi + 1/2`.
    pub fn surrogate(&self, x: f32) -> f32 {
        let u = PI / 2.0 * self.surrogate_alpha * x;
        if u < -1.0 {
            // atan(u) = -pi/2 - atan(1/u), which avoids cancelling near zero
            (-1.0 / u).atan() / PI
        } else {
            u.atan() / PI + 0.5
        }
    }

    /// Derivative of [`LifConfig::surrogate`].
    pub fn surrogate_grad(&self, x: f32) -> f32 {
        let a = self.surrogate_alpha;
        let u = PI / 2.0 * a * x;
        a / 2.0 / (1.0 + u * u)
    }
}

/// Membrane record of one simulation.
#[derive(Debug, Clone)]
pub struct LifState {
    /// Potential after the last step, `[rest]`.
    pub v: DenseTensor,
    /// Pre-reset potential at every step, `[T, rest]`; needed for backward.
    pub h: DenseTensor,
    /// Emitted spikes, `[T, rest]`.
    pub spikes: SpikeTensor,
}

struct Simulation {
    s: Vec<f32>,
    h: Vec<f32>,
    v: Vec<f32>,
}

fn simulate(x: &[f32], steps: usize, cfg: &LifConfig, mode: SpikeMode) -> Result<Simulation> {
    if steps == 0 || x.len() % steps != 0 {
        return Err(Error::dim(format!("{} elements cannot be split into {steps} time steps", x.len())));
    }
    if let Some(i) = x.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite neuron input at element {i}")));
    }
    let n = x.len() / steps;
    let mut v = vec![cfg.v_reset; n];
    let mut s = vec![0.0; x.len()];
    let mut h = vec![0.0; x.len()];
    for t in 0..steps {
        for j in 0..n {
            let i = t * n + j;
            let hh = v[j] + (x[i] - (v[j] - cfg.v_reset)) / cfg.tau;
            let (ss, keep) = match mode {
                SpikeMode::Hard => {
                    let f = (hh >= cfg.v_threshold) as u8 as f32;
                    (f, 1.0 - f)
                }
                SpikeMode::Relaxed => (cfg.surrogate(hh - cfg.v_threshold), cfg.surrogate(cfg.v_threshold - hh)),
            };
            v[j] = match cfg.reset_mode {
                ResetMode::Hard => hh * keep + cfg.v_reset * ss,
                ResetMode::Soft => hh - cfg.v_threshold * ss,
            };
            h[i] = hh;
            s[i] = ss;
        }
    }
    Ok(Simulation { s, h, v })
}

/// Runs the neuron over `x` viewed as `[steps, rest]`, from a reset state.
pub fn lif_forward(x: &DenseTensor, steps: usize, cfg: &LifConfig) -> Result<(SpikeTensor, LifState)> {
    cfg.validate()?;
    let sim = simulate(x.data(), steps, cfg, SpikeMode::Hard)?;
    let n = x.numel() / steps;
    let spikes = SpikeTensor::from_values(x.shape().to_vec(), &sim.s)?;
    let state = LifState {
        v: DenseTensor::new([n], sim.v)?,
        h: DenseTensor::new([steps, n], sim.h)?,
        spikes: spikes.clone(),
    };
    Ok((spikes, state))
}

fn bptt(grad_out: &[f32], h: &[f32], s: &[f32], steps: usize, cfg: &LifConfig, mode: SpikeMode) -> Vec<f32> {
    let n = h.len() / steps;
    let mut gx = vec![0.0; h.len()];
    let mut gv = vec![0.0f32; n];
    let decay = 1.0 - 1.0 / cfg.tau;
    for t in (0..steps).rev() {
        for j in 0..n {
            let i = t * n + j;
            let ds = cfg.surrogate_grad(h[i] - cfg.v_threshold);
            let keep = match mode {
                SpikeMode::Hard => 1.0 - s[i],
                SpikeMode::Relaxed => cfg.surrogate(cfg.v_threshold - h[i]),
            };
            let dv_dh = match (cfg.reset_mode, cfg.detach_reset) {
                (ResetMode::Hard, true) => keep,
                (ResetMode::Hard, false) => keep + (cfg.v_reset - h[i]) * ds,
                (ResetMode::Soft, true) => 1.0,
                (ResetMode::Soft, false) => 1.0 - cfg.v_threshold * ds,
            };
            let gh = grad_out[i] * ds + gv[j] * dv_dh;
            gx[i] = gh / cfg.tau;
            gv[j] = gh * decay;
        }
    }
    gx
}

/// Surrogate-gradient backward through time for a recorded simulation.
pub fn lif_backward(grad_out: &DenseTensor, state: &LifState, cfg: &LifConfig) -> Result<DenseTensor> {
    let steps = state.h.shape().first().copied().unwrap_or(0);
    if state.h.numel() == 0 || steps == 0 {
        return Err(Error::usage("neuron backward without a recorded forward"));
    }
    if grad_out.numel() != state.h.numel() {
        return Err(Error::dim(format!("gradient has {} elements, state has {}", grad_out.numel(), state.h.numel())));
    }
    let s = state.spikes.to_values();
    let gx = bptt(grad_out.data(), state.h.data(), &s, steps, cfg, SpikeMode::Hard);
    DenseTensor::new(grad_out.shape().to_vec(), gx)
}

struct LifOp {
    cfg: LifConfig,
    mode: SpikeMode,
    steps: usize,
    h: Vec<f32>,
}

impl CustomOp for LifOp {
    fn name(&self) -> &'static str {
        "lif"
    }

    fn backward(&self, grad_out: &[f32], _inputs: &[&DenseTensor], output: &DenseTensor) -> Result<Vec<Option<Vec<f32>>>> {
        Ok(vec![Some(bptt(grad_out, &self.h, output.data(), self.steps, &self.cfg, self.mode))])
    }
}

/// Tape-level spiking neuron layer.
#[derive(Debug, Clone)]
pub struct Lif {
    pub name: String,
    pub cfg: LifConfig,
}

impl Lif {
    pub fn new(name: &str, cfg: LifConfig) -> Self {
        Self { name: name.to_string(), cfg }
    }

    /// `x` is `[steps * B, ...]`; the output has the same shape.
    pub fn forward(&self, fx: &mut Forward<'_>, x: Var, steps: usize) -> Result<Var> {
        fx.trace(&format!("{}.input", self.name), TraceKind::PreSpike, x);
        let sim = simulate(fx.value(x).data(), steps, &self.cfg, fx.mode)?;
        let out = DenseTensor::new(fx.tape.shape(x).to_vec(), sim.s)?;
        if fx.counting() {
            let mut rec = LayerRecord::new(&self.name, OpKind::Neuron);
            rec.spikes = out.data().iter().filter(|&&v| v != 0.0).count() as u64;
            rec.elements = out.numel() as u64;
            fx.record(rec);
        }
        let op = LifOp { cfg: self.cfg, mode: fx.mode, steps, h: sim.h };
        let hard = fx.mode == SpikeMode::Hard;
        let y = fx.tape.custom(&[x], out, Box::new(op), hard);
        fx.trace(&self.name, TraceKind::Spike, y);
        Ok(y)
    }
}
