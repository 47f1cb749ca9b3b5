use std::fmt::Write as _;

use crate::architecture::StemKind;
use crate::attention::AttentionVariant;
use crate::error::{Error, Result};

use super::config::RunConfig;
use super::run::{pretrain_then_finetune, CALIBRATION_PASSES, profile_model, train_classifier, Prepared};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Variant,
    Stem,
    TimeSteps,
    MaskRatio,
}

impl SweepAxis {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "variant" => Ok(SweepAxis::Variant),
            "stem" => Ok(SweepAxis::Stem),
            "t" | "time_steps" => Ok(SweepAxis::TimeSteps),
            "mask_ratio" => Ok(SweepAxis::MaskRatio),
            other => Err(Error::Usage(format!("unknown sweep axis {other:?}"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::Variant => "variant",
            SweepAxis::Stem => "stem",
            SweepAxis::TimeSteps => "time_steps",
            SweepAxis::MaskRatio => "mask_ratio",
        }
    }

    /// Copy of `base` with this axis set to `value`.
    pub fn apply(self, base: &RunConfig, value: &str) -> Result<RunConfig> {
        let mut cfg = base.clone();
        match self {
            SweepAxis::Variant => cfg.model.variant = AttentionVariant::parse(value)?,
            SweepAxis::Stem => cfg.model.stem = StemKind::parse(value)?,
            SweepAxis::TimeSteps => {
                cfg.model.time_steps = value.parse().map_err(|_| Error::config(format!("bad time-step count {value:?}")))?
            }
            SweepAxis::MaskRatio => {
                cfg.pretrain.mask_ratio = value.parse().map_err(|_| Error::config(format!("bad mask ratio {value:?}")))?
            }
        }
        Ok(cfg)
    }
}

/// One run of a sweep. Failed runs keep their error and no metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: String,
    pub accuracy: Option<f64>,
    /// Per-sample totals over all time steps.
    pub flops: Option<f64>,
    pub sops: Option<f64>,
    pub energy_uj: Option<f64>,
    pub error: Option<String>,
}

impl SweepRow {
    pub fn ok(&self) -> bool {
        self.error.is_none()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    pub axis: String,
    pub rows: Vec<SweepRow>,
}

const HEADER: &str = "value\tstatus\taccuracy\tflops\tsops\tenergy_uj\terror";

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x}"))
}

fn parse_cell(s: &str) -> Result<Option<f64>> {
    if s == "-" {
        return Ok(None);
    }
    s.parse().map(Some).map_err(|_| Error::Data(format!("bad sweep cell {s:?}")))
}

impl SweepReport {
    pub fn to_tsv(&self) -> String {
        let mut s = format!("# axis={}\n{HEADER}\n", self.axis);
        for r in &self.rows {
            let status = if r.ok() { "ok" } else { "failed" };
            let err = r.error.as_deref().unwrap_or("-").replace(['\t', '\n'], " ");
            let _ = writeln!(s, "{}\t{status}\t{}\t{}\t{}\t{}\t{err}", r.value, cell(r.accuracy), cell(r.flops), cell(r.sops), cell(r.energy_uj));
        }
        s
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let axis = lines
            .next()
            .and_then(|l| l.strip_prefix("# axis="))
            .ok_or_else(|| Error::Data("sweep report lacks axis line".into()))?
            .to_string();
        if lines.next() != Some(HEADER) {
            return Err(Error::Data("sweep report header mismatch".into()));
        }
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 7 {
                return Err(Error::Data(format!("sweep row {i} has {} fields", f.len())));
            }
            rows.push(SweepRow {
                value: f[0].to_string(),
                accuracy: parse_cell(f[2])?,
                flops: parse_cell(f[3])?,
                sops: parse_cell(f[4])?,
                energy_uj: parse_cell(f[5])?,
                error: (f[1] != "ok").then(|| f[6].to_string()),
            });
        }
        Ok(Self { axis, rows })
    }
}

fn run_row(axis: SweepAxis, value: &str, base: &RunConfig) -> Result<SweepRow> {
    let cfg = axis.apply(base, value)?;
    let prep = Prepared::load(&cfg)?;
    let (mut model, _) = match axis {
        SweepAxis::MaskRatio => pretrain_then_finetune(&cfg, &prep, |_| {})?,
        _ => train_classifier(&cfg, &prep, |_| {})?,
    };
    if cfg.train.epochs == 0 {
        let n = prep.eval().len().min(cfg.train.batch_size);
        model.calibrate(&prep.eval().select(&(0..n).collect::<Vec<_>>()).images, cfg.model.time_steps, CALIBRATION_PASSES)?;
    }
    let acc = crate::training::evaluate(&mut model, prep.eval(), cfg.model.time_steps, cfg.train.batch_size)?;
    let rep = profile_model(&mut model, prep.eval(), cfg.model.time_steps)?;
    Ok(SweepRow {
        value: value.to_string(),
        accuracy: Some(acc),
        flops: Some(rep.total.flops),
        sops: Some(rep.total.sops),
        energy_uj: Some(rep.total.energy_mj * 1e3),
        error: None,
    })
}

/// One run per value; a failing run is marked in its row and the sweep
/// moves on.
pub fn sweep(axis: SweepAxis, values: &[String], base: &RunConfig, mut on_row: impl FnMut(&SweepRow)) -> SweepReport {
    let rows = values
        .iter()
        .map(|v| {
            let row = run_row(axis, v, base).unwrap_or_else(|e| SweepRow {
                value: v.clone(),
                accuracy: None,
                flops: None,
                sops: None,
                energy_uj: None,
                error: Some(e.to_string()),
            });
            on_row(&row);
            row
        })
        .collect();
    SweepReport { axis: axis.as_str().to_string(), rows }
}
