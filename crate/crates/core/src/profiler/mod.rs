//! FLOP/SOP accounting, firing statistics and energy estimates.

mod energy;
mod ledger;
mod report;

pub use energy::{estimate_energy, round_to, Energy, EnergyModel};
pub use ledger::{
    firing_stats, theoretical_sops, ActivationTrace, LayerRecord, OpKind, OpLedger, Totals, TraceEntry, TraceKind,
};
pub use report::{report, Report, ReportRow, ReportTotals};
