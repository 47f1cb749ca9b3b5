use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::ledger::OpLedger;

/// Per-operation energy costs in picojoules.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyModel {
    pub e_mac_pj: f64,
    pub e_ac_pj: f64,
}

impl Default for EnergyModel {
    fn default() -> Self {
        Self { e_mac_pj: 4.6, e_ac_pj: 0.9 }
    }
}

impl EnergyModel {
    pub fn new(e_mac_pj: f64, e_ac_pj: f64) -> Result<Self> {
        if !(e_mac_pj > 0.0 && e_ac_pj > 0.0) {
            return Err(Error::config(format!("energy constants must be positive, got {e_mac_pj} / {e_ac_pj}")));
        }
        Ok(Self { e_mac_pj, e_ac_pj })
    }

    pub fn energy(&self, flops: f64, sops: f64) -> Energy {
        Energy { picojoules: flops * self.e_mac_pj + sops * self.e_ac_pj }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct Energy {
    pub picojoules: f64,
}

impl Energy {
    pub fn micro_joules(self) -> f64 {
        self.picojoules * 1e-6
    }

    pub fn milli_joules(self) -> f64 {
        self.picojoules * 1e-9
    }
}

/// Energy of everything in `ledger`.
pub fn estimate_energy(ledger: &OpLedger, model: &EnergyModel) -> Result<Energy> {
    if ledger.is_empty() {
        return Err(Error::usage("energy estimate requested for an empty ledger"));
    }
    let t = ledger.totals();
    Ok(model.energy(t.flops as f64, t.sops as f64))
}

/// Rounds to `digits` decimal places, for comparison against printed figures.
pub fn round_to(x: f64, digits: i32) -> f64 {
    let p = 10f64.powi(digits);
    (x * p).round() / p
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::profiler::ledger::{LayerRecord, OpKind};

    #[test]
    fn zero_ops_zero_energy() {
        assert_eq!(EnergyModel::default().energy(0.0, 0.0).picojoules, 0.0);
    }

    #[test]
    fn empty_ledger_is_usage_error() {
        assert!(matches!(estimate_energy(&OpLedger::new(), &EnergyModel::default()), Err(Error::Usage(_))));
    }

    #[test]
    fn linear_in_counts() {
        let mut l = OpLedger::new();
        l.record(LayerRecord::new("x", OpKind::Linear).with_flops(1000).with_sops(300));
        let m = EnergyModel::default();
        let e1 = estimate_energy(&l, &m).unwrap().picojoules;
        let e3 = estimate_energy(&l.scaled(3), &m).unwrap().picojoules;
        assert!((e3 - 3.0 * e1).abs() < 1e-9);
    }

    #[test]
    fn rejects_non_positive_constants() {
        assert!(EnergyModel::new(0.0, 0.9).is_err());
        assert!(EnergyModel::new(4.6, -1.0).is_err());
    }
}
