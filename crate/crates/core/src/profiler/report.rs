use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::energy::EnergyModel;
use super::ledger::{OpKind, OpLedger};

/// One layer's counts normalized to a single sample over all time steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub layer: String,
    pub kind: OpKind,
    pub flops: f64,
    pub sops: f64,
    pub firing_rate: Option<f64>,
    pub energy_mj: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReportTotals {
    pub flops: f64,
    pub sops: f64,
    /// FLOPs plus SOPs, in units of 10^9.
    pub ops_g: f64,
    pub energy_mj: f64,
}

/// Per-sample profile with totals over all time steps and for one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub time_steps: usize,
    pub rows: Vec<ReportRow>,
    pub total: ReportTotals,
    pub per_step: ReportTotals,
}

fn totals(flops: f64, sops: f64, model: &EnergyModel) -> ReportTotals {
    ReportTotals { flops, sops, ops_g: (flops + sops) * 1e-9, energy_mj: model.energy(flops, sops).milli_joules() }
}

pub fn report(ledger: &OpLedger, model: &EnergyModel) -> Report {
    let per_sample = 1.0 / ledger.batch.max(1) as f64;
    let rows: Vec<ReportRow> = ledger
        .records()
        .iter()
        .map(|r| {
            let (f, s) = (r.flops as f64 * per_sample, r.sops as f64 * per_sample);
            ReportRow {
                layer: r.layer.clone(),
                kind: r.kind,
                flops: f,
                sops: s,
                firing_rate: r.firing_rate(),
                energy_mj: model.energy(f, s).milli_joules(),
            }
        })
        .collect();
    let f: f64 = rows.iter().map(|r| r.flops).sum();
    let s: f64 = rows.iter().map(|r| r.sops).sum();
    let t = ledger.time_steps.max(1) as f64;
    Report {
        time_steps: ledger.time_steps,
        total: totals(f, s, model),
        per_step: totals(f / t, s / t, model),
        rows,
    }
}

const HEADER: &str = "layer\tkind\tflops\tsops\tops_g\tfiring_rate\tenergy_mj";

impl Report {
    pub fn to_tsv(&self) -> String {
        let mut out = format!("# time_steps={}\n{HEADER}\n", self.time_steps);
        for r in &self.rows {
            let rate = r.firing_rate.map_or_else(|| "-".to_string(), |v| format!("{v}"));
            out += &format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                r.layer,
                r.kind.as_str(),
                r.flops,
                r.sops,
                (r.flops + r.sops) * 1e-9,
                rate,
                r.energy_mj
            );
        }
        for (name, t) in [("total", &self.total), ("per_step", &self.per_step)] {
            out += &format!("{name}\t-\t{}\t{}\t{}\t-\t{}\n", t.flops, t.sops, t.ops_g, t.energy_mj);
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Report> {
        let bad = |line: usize, msg: &str| Error::Data(format!("report line {line}: {msg}"));
        let mut lines = text.lines().enumerate();
        let time_steps = lines
            .next()
            .and_then(|(_, l)| l.strip_prefix("# time_steps="))
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad(1, "missing time_steps preamble"))?;
        if lines.next().map(|(_, l)| l) != Some(HEADER) {
            return Err(bad(2, "unexpected header"));
        }
        let num = |s: &str, i: usize| s.parse::<f64>().map_err(|_| bad(i + 1, &format!("bad number {s:?}")));
        let mut rows = Vec::new();
        let mut total = None;
        let mut per_step = None;
        for (i, line) in lines {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 7 {
                return Err(bad(i + 1, "expected 7 fields"));
            }
            let t = ReportTotals { flops: num(f[2], i)?, sops: num(f[3], i)?, ops_g: num(f[4], i)?, energy_mj: num(f[6], i)? };
            match f[0] {
                "total" => total = Some(t),
                "per_step" => per_step = Some(t),
                layer => rows.push(ReportRow {
                    layer: layer.to_string(),
                    kind: OpKind::parse(f[1]).ok_or_else(|| bad(i + 1, "unknown op kind"))?,
                    flops: t.flops,
                    sops: t.sops,
                    firing_rate: if f[5] == "-" { None } else { Some(num(f[5], i)?) },
                    energy_mj: t.energy_mj,
                }),
            }
        }
        Ok(Report {
            time_steps,
            rows,
            total: total.ok_or_else(|| bad(0, "missing total line"))?,
            per_step: per_step.ok_or_else(|| bad(0, "missing per_step line"))?,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Report> {
        serde_json::from_str(text).map_err(|e| Error::Data(format!("report json: {e}")))
    }
}
