use serde::{Deserialize, Serialize};

use crate::tensor::DenseTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Linear,
    Conv,
    Attention,
    Neuron,
    Norm,
    Pool,
}

impl OpKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OpKind::Linear => "linear",
            OpKind::Conv => "conv",
            OpKind::Attention => "attention",
            OpKind::Neuron => "neuron",
            OpKind::Norm => "norm",
            OpKind::Pool => "pool",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "linear" => OpKind::Linear,
            "conv" => OpKind::Conv,
            "attention" => OpKind::Attention,
            "neuron" => OpKind::Neuron,
            "norm" => OpKind::Norm,
            "pool" => OpKind::Pool,
            _ => return None,
        })
    }
}

/// Counts for one layer. Repeated records for the same layer and kind are
/// merged, so a layer invoked once per head or per step has one row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub layer: String,
    pub kind: OpKind,
    pub flops: u64,
    pub sops: u64,
    /// Float multiplies executed between attention operands.
    pub operand_float_muls: u64,
    /// Ones and total elements of the spike tensor this layer emitted.
    pub spikes: u64,
    pub elements: u64,
}

impl LayerRecord {
    pub fn new(layer: impl Into<String>, kind: OpKind) -> Self {
        Self { layer: layer.into(), kind, flops: 0, sops: 0, operand_float_muls: 0, spikes: 0, elements: 0 }
    }

    pub fn with_flops(mut self, flops: u64) -> Self {
        self.flops = flops;
        self
    }

    pub fn with_sops(mut self, sops: u64) -> Self {
        self.sops = sops;
        self
    }

    pub fn firing_rate(&self) -> Option<f64> {
        (self.elements > 0).then(|| self.spikes as f64 / self.elements as f64)
    }

    fn merge(&mut self, other: &LayerRecord) {
        self.flops += other.flops;
        self.sops += other.sops;
        self.operand_float_muls += other.operand_float_muls;
        self.spikes += other.spikes;
        self.elements += other.elements;
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Totals {
    pub flops: u64,
    pub sops: u64,
}

/// Per-layer FLOP/SOP ledger filled during an instrumented forward pass.
/// Counts cover the whole batch over all time steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpLedger {
    records: Vec<LayerRecord>,
    pub time_steps: usize,
    pub batch: usize,
    /// Count norm and pooling FLOPs too; off by default.
    pub count_norm_pool: bool,
}

impl Default for OpLedger {
    fn default() -> Self {
        Self::new()
    }
}

impl OpLedger {
    pub fn new() -> Self {
        Self { records: Vec::new(), time_steps: 1, batch: 1, count_norm_pool: false }
    }

    pub fn record(&mut self, rec: LayerRecord) {
        if !self.count_norm_pool && matches!(rec.kind, OpKind::Norm | OpKind::Pool) {
            return;
        }
        match self.records.iter_mut().find(|r| r.layer == rec.layer && r.kind == rec.kind) {
            Some(r) => r.merge(&rec),
            None => self.records.push(rec),
        }
    }

    pub fn records(&self) -> &[LayerRecord] {
        &self.records
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, layer: &str, kind: OpKind) -> Option<&LayerRecord> {
        self.records.iter().find(|r| r.layer == layer && r.kind == kind)
    }

    pub fn totals(&self) -> Totals {
        self.records.iter().fold(Totals::default(), |t, r| Totals { flops: t.flops + r.flops, sops: t.sops + r.sops })
    }

    /// Multiplies every count by `c`.
    pub fn scaled(&self, c: u64) -> OpLedger {
        let mut out = self.clone();
        for r in &mut out.records {
            r.flops *= c;
            r.sops *= c;
            r.operand_float_muls *= c;
        }
        out
    }

    /// Float multiplies on attention operand products across all layers.
    pub fn operand_float_muls(&self) -> u64 {
        self.records.iter().map(|r| r.operand_float_muls).sum()
    }
}

/// Per-layer firing rates, in record order.
pub fn firing_stats(ledger: &OpLedger) -> Vec<(String, f64)> {
    ledger
        .records()
        .iter()
        .filter_map(|r| Some((r.layer.clone(), r.firing_rate()?)))
        .collect()
}

/// Rate-times-dense-count SOP estimate.
pub fn theoretical_sops(firing_rate: f64, dense_ops: u64) -> f64 {
    firing_rate * dense_ops as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceKind {
    /// Output of a spiking neuron or a residual join.
    Spike,
    /// Input current to a spiking neuron.
    PreSpike,
}

#[derive(Debug, Clone)]
pub struct TraceEntry {
    pub name: String,
    pub kind: TraceKind,
    pub value: DenseTensor,
}

/// Captured intermediate activations, for inspection and invariant checks.
#[derive(Debug, Clone, Default)]
pub struct ActivationTrace {
    pub entries: Vec<TraceEntry>,
}

impl ActivationTrace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, kind: TraceKind, value: DenseTensor) {
        self.entries.push(TraceEntry { name: name.into(), kind, value });
    }

    pub fn find(&self, name: &str) -> Option<&TraceEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn of_kind(&self, kind: TraceKind) -> impl Iterator<Item = &TraceEntry> {
        self.entries.iter().filter(move |e| e.kind == kind)
    }
}
