use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde_json::json;

use crate::architecture::{Checkpoint, ModelConfig, Spikformer, StemKind};
use crate::error::{Error, Result};
use crate::pretrain::{finetune_handoff, sample_batch_masks, MaskedAutoencoder};
use crate::profiler::{report, EnergyModel, Report};
use crate::tensor::DenseTensor;
use crate::training::{evaluate, metrics_tsv, EpochMetrics, TrainConfig, Trainer};

use super::config::{RunConfig, Task};
use super::data::{load_dataset, Dataset};
use super::plot::{bar_chart_svg, line_plot_svg, write_panels, Series};

/// Training-mode passes used to settle batch-norm statistics of an
/// untrained model before profiling.
pub(crate) const CALIBRATION_PASSES: usize = 2;

/// Datasets loaded for a run.
pub struct Prepared {
    pub train: Dataset,
    pub eval: Option<Dataset>,
}

impl Prepared {
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let train = load_dataset(&cfg.data)?;
        let eval = cfg.eval_data.as_ref().map(load_dataset).transpose()?;
        if let Some(e) = &eval {
            if e.image_shape() != train.image_shape() || e.num_classes != train.num_classes {
                return Err(Error::config("evaluation data does not match the training data"));
            }
        }
        Ok(Self { train, eval })
    }

    /// Held-out data when present, else the training set.
    pub fn eval(&self) -> &Dataset {
        self.eval.as_ref().unwrap_or(&self.train)
    }

    pub fn image_size(&self) -> [usize; 2] {
        let s = self.train.image_shape();
        [s[1], s[2]]
    }
}

pub fn model_config(cfg: &RunConfig, prep: &Prepared) -> Result<ModelConfig> {
    let mut m = cfg.model.to_config(prep.train.num_classes, prep.image_size())?;
    m.in_channels = prep.train.image_shape()[0];
    m.validate()?;
    Ok(m)
}

/// Training settings with the run's seed and the model's time steps.
pub fn train_config(cfg: &RunConfig) -> TrainConfig {
    TrainConfig { seed: cfg.seed, time_steps: cfg.model.time_steps, ..cfg.train.clone() }
}

pub fn train_classifier(cfg: &RunConfig, prep: &Prepared, on_epoch: impl FnMut(&EpochMetrics)) -> Result<(Spikformer, Vec<EpochMetrics>)> {
    let mut model = Spikformer::new(model_config(cfg, prep)?, cfg.seed)?;
    let hist = Trainer::new(train_config(cfg))?.fit(&mut model, &prep.train, prep.eval.as_ref(), on_epoch)?;
    Ok((model, hist))
}

fn pretrain_model(cfg: &RunConfig, prep: &Prepared, on_epoch: impl FnMut(&EpochMetrics)) -> Result<(MaskedAutoencoder, Vec<EpochMetrics>)> {
    let mut mcfg = model_config(cfg, prep)?;
    if mcfg.stem.kind != StemKind::Scs {
        return Err(Error::Unsupported("masked pretraining needs --stem scs".into()));
    }
    mcfg.time_steps = cfg.pretrain.time_steps;
    let mut mae = MaskedAutoencoder::new(mcfg, cfg.pretrain.decoder, cfg.seed)?;
    let tc = TrainConfig { epochs: cfg.pretrain.epochs, time_steps: cfg.pretrain.time_steps, seed: cfg.seed, ..cfg.train.clone() };
    let hist = Trainer::new(tc)?.pretrain(&mut mae, &prep.train, cfg.pretrain.mask_ratio, on_epoch)?;
    Ok((mae, hist))
}

fn finetune_from(ckpt: &Checkpoint, cfg: &RunConfig, prep: &Prepared, on_epoch: impl FnMut(&EpochMetrics)) -> Result<(Spikformer, Vec<EpochMetrics>)> {
    let mut target = ckpt.model_config()?;
    target.num_classes = prep.train.num_classes;
    target.time_steps = cfg.model.time_steps;
    target.variant = cfg.model.variant;
    target.residual = cfg.model.residual;
    let mut model = finetune_handoff(ckpt, target, cfg.seed)?;
    let hist = Trainer::new(train_config(cfg))?.fit(&mut model, &prep.train, prep.eval.as_ref(), on_epoch)?;
    Ok((model, hist))
}

/// Masked pretraining followed by supervised finetuning of the encoder.
pub fn pretrain_then_finetune(cfg: &RunConfig, prep: &Prepared, mut on_epoch: impl FnMut(&EpochMetrics)) -> Result<(Spikformer, Vec<EpochMetrics>)> {
    let (mae, _) = pretrain_model(cfg, prep, &mut on_epoch)?;
    finetune_from(&mae.to_checkpoint(json!({})), cfg, prep, on_epoch)
}

/// Per-sample op report from one eval-mode pass over the first item.
pub fn profile_model(model: &mut Spikformer, data: &Dataset, steps: usize) -> Result<Report> {
    let batch = data.select(&[0]);
    let ledger = model.profile(&batch.images, steps)?;
    Ok(report(&ledger, &EnergyModel::default()))
}

fn require_checkpoint(cfg: &RunConfig) -> Result<Checkpoint> {
    let path = cfg.checkpoint.as_ref().ok_or_else(|| Error::Usage(format!("{} needs --checkpoint", cfg.task.as_str())))?;
    Checkpoint::load(path)
}

fn history_plot(dir: &Path, hist: &[EpochMetrics]) -> Result<()> {
    let pick = |f: fn(&EpochMetrics) -> Option<f64>| -> Vec<(f64, f64)> { hist.iter().filter_map(|m| f(m).map(|v| (m.epoch as f64, v))).collect() };
    let mut series = vec![Series { name: "train loss".into(), points: pick(|m| Some(m.train_loss)) }];
    for (name, f) in [("train acc", (|m: &EpochMetrics| m.train_acc) as fn(&EpochMetrics) -> Option<f64>), ("eval acc", |m| m.eval_acc)] {
        let p = pick(f);
        if !p.is_empty() {
            series.push(Series { name: name.into(), points: p });
        }
    }
    fs::write(dir.join("metrics.svg"), line_plot_svg("training", "epoch", "value", &series))?;
    fs::write(dir.join("metrics.tsv"), metrics_tsv(hist))?;
    Ok(())
}

fn meta(cfg: &RunConfig, extra: serde_json::Value) -> serde_json::Value {
    json!({ "task": cfg.task.as_str(), "seed": cfg.seed, "token_order": "row-major", "run_config_hash": format!("{:016x}", cfg.hash()), "extra": extra })
}

fn log_epoch<'a>(out: &'a mut dyn Write) -> impl FnMut(&EpochMetrics) + 'a {
    move |m| {
        let _ = writeln!(
            out,
            "epoch {}\tlr {:.3e}\tloss {:.4}\ttrain_acc {}\teval_acc {}",
            m.epoch,
            m.lr,
            m.train_loss,
            m.train_acc.map_or("-".into(), |a| format!("{a:.4}")),
            m.eval_acc.map_or("-".into(), |a| format!("{a:.4}"))
        );
    }
}

/// Runs the configured task, writing artifacts under a fresh run directory
/// and progress to `out`. Returns the run directory.
pub fn execute(cfg: &RunConfig, out: &mut dyn Write) -> Result<PathBuf> {
    let prep = Prepared::load(cfg)?;
    if matches!(cfg.task, Task::Finetune | Task::Eval | Task::Reconstruct) && cfg.checkpoint.is_none() {
        return Err(Error::Usage(format!("{} needs --checkpoint", cfg.task.as_str())));
    }
    let dir = cfg.run_dir();
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("config.toml"), cfg.to_toml())?;
    writeln!(out, "run directory: {}", dir.display())?;
    match cfg.task {
        Task::Train => {
            let (model, hist) = train_classifier(cfg, &prep, log_epoch(out))?;
            history_plot(&dir, &hist)?;
            model.save(dir.join("checkpoint.bin"), meta(cfg, json!(null)))?;
        }
        Task::Pretrain => {
            let (mae, hist) = pretrain_model(cfg, &prep, log_epoch(out))?;
            history_plot(&dir, &hist)?;
            mae.to_checkpoint(meta(cfg, json!({ "mask_ratio": cfg.pretrain.mask_ratio }))).save(dir.join("checkpoint.bin"))?;
        }
        Task::Finetune => {
            let ckpt = require_checkpoint(cfg)?;
            let (model, hist) = finetune_from(&ckpt, cfg, &prep, log_epoch(out))?;
            history_plot(&dir, &hist)?;
            model.save(dir.join("checkpoint.bin"), meta(cfg, json!(null)))?;
        }
        Task::Eval => {
            let mut model = Spikformer::from_checkpoint(&require_checkpoint(cfg)?)?;
            let steps = if cfg.eval_time_steps.is_empty() { vec![model.cfg().time_steps] } else { cfg.eval_time_steps.clone() };
            let mut tsv = String::from("time_steps\taccuracy\n");
            for t in steps {
                let acc = evaluate(&mut model, prep.eval(), t, cfg.train.batch_size)?;
                writeln!(out, "T={t}\taccuracy={acc:.4}")?;
                tsv.push_str(&format!("{t}\t{acc}\n"));
            }
            fs::write(dir.join("eval.tsv"), tsv)?;
        }
        Task::Profile => {
            let mut model = match &cfg.checkpoint {
                Some(p) => Spikformer::load(p)?,
                None => {
                    let mut m = Spikformer::new(model_config(cfg, &prep)?, cfg.seed)?;
                    let n = prep.eval().len().min(cfg.train.batch_size);
                    let cal = prep.eval().select(&(0..n).collect::<Vec<_>>());
                    let steps = m.cfg().time_steps;
                    m.calibrate(&cal.images, steps, CALIBRATION_PASSES)?;
                    m
                }
            };
            let steps = model.cfg().time_steps;
            let rep = profile_model(&mut model, prep.eval(), steps)?;
            let tsv = rep.to_tsv();
            out.write_all(tsv.as_bytes())?;
            fs::write(dir.join("report.tsv"), &tsv)?;
            fs::write(dir.join("report.json"), rep.to_json())?;
            let bars: Vec<(String, f64)> = rep.rows.iter().map(|r| (r.layer.clone(), r.energy_mj * 1e3)).collect();
            fs::write(dir.join("energy.svg"), bar_chart_svg("energy per layer", "uJ", &bars))?;
        }
        Task::Reconstruct => {
            let mut mae = MaskedAutoencoder::from_checkpoint(&require_checkpoint(cfg)?)?;
            let data = prep.eval();
            let k = cfg.pretrain.dump_images.min(data.len()).max(1);
            let batch = data.select(&(0..k).collect::<Vec<_>>());
            let masks = sample_batch_masks(mae.cfg().grid(), cfg.pretrain.mask_ratio, cfg.seed, k)?;
            let steps = mae.cfg().time_steps;
            let (loss, recon) = mae.reconstruct(&batch.images, &masks, steps)?;
            writeln!(out, "reconstruction loss {loss:.6}")?;
            let patch = mae.cfg().patch_size();
            let (mean, std) = (cfg.data.mean, cfg.data.std);
            for i in 0..k {
                let orig = item(&batch.images, i);
                let masked = masked_view(&orig, &masks[i].upsampled(patch)?, &mean, &std);
                let rec = item(&recon, i);
                write_panels(&dir.join(format!("reconstruction_{i}.png")), &[&orig, &masked, &rec], &mean, &std)?;
            }
        }
    }
    Ok(dir)
}

fn item(batch: &DenseTensor, i: usize) -> DenseTensor {
    let n = batch.numel() / batch.shape()[0];
    DenseTensor::new(batch.shape()[1..].to_vec(), batch.data()[i * n..(i + 1) * n].to_vec()).expect("item shape")
}

/// Image with hidden pixels set to the normalized value of mid-gray.
fn masked_view(image: &DenseTensor, pixel_mask: &[f32], mean: &[f32; 3], std: &[f32; 3]) -> DenseTensor {
    let hw = pixel_mask.len();
    let mut out = image.clone();
    for (c, plane) in out.data_mut().chunks_mut(hw).enumerate() {
        let gray = (0.5 - mean[c % 3]) / std[c % 3];
        for (v, &m) in plane.iter_mut().zip(pixel_mask) {
            if m == 0.0 {
                *v = gray;
            }
        }
    }
    out
}
