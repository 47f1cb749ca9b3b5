//! Supervised and masked-pretraining loops, the optimizer and the learning
//! rate schedule.

mod optim;
mod schedule;

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::architecture::Spikformer;
use crate::error::{Error, Result};
use crate::harness::{Batch, Dataset};
use crate::nn::Forward;
use crate::pretrain::{masked_forward, sample_batch_masks, MaskedAutoencoder};
use crate::tensor::DenseTensor;

pub use optim::{clip_grad_norm, grad_norm, layer_decay_scale, AdamW};
pub use schedule::{scaled_lr, Schedule};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub min_lr: f64,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub time_steps: usize,
    pub seed: u64,
    /// Stop once train accuracy reaches this value.
    pub target_accuracy: Option<f64>,
    /// Layer-wise learning-rate decay factor.
    pub layer_decay: Option<f64>,
    /// Train only the head; the rest runs in eval mode with fixed weights.
    pub freeze_encoder: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 16,
            base_lr: scaled_lr(5e-4, 16),
            min_lr: 1e-6,
            warmup_epochs: 1,
            weight_decay: 0.05,
            clip_norm: 5.0,
            time_steps: 4,
            seed: 0,
            target_accuracy: None,
            layer_decay: None,
            freeze_encoder: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.time_steps == 0 {
            return Err(Error::config("batch size and time steps must be positive"));
        }
        if !(self.base_lr >= 0.0 && self.min_lr >= 0.0 && self.clip_norm > 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::config("learning rates, decay and clip norm must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: Option<f64>,
    pub eval_acc: Option<f64>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.6}"))
}

/// Tab-separated metrics log, one line per epoch.
pub fn metrics_tsv(rows: &[EpochMetrics]) -> String {
    let mut s = String::from("epoch\tlr\ttrain_loss\ttrain_acc\teval_acc\n");
    for r in rows {
        let _ = writeln!(s, "{}\t{:.6e}\t{:.6}\t{}\t{}", r.epoch, r.lr, r.train_loss, fmt_opt(r.train_acc), fmt_opt(r.eval_acc));
    }
    s
}

fn argmax(row: &[f32]) -> usize {
    row.iter().enumerate().fold(0, |best, (i, &v)| if v > row[best] { i } else { best })
}

/// Number of rows of `[B, C]` logits whose argmax equals the label.
pub fn count_correct(logits: &DenseTensor, labels: &[usize]) -> usize {
    let c = logits.shape()[1];
    logits.data().chunks(c).zip(labels).filter(|(row, &l)| argmax(row) == l).count()
}

/// Eval-mode top-1 accuracy over `data` at `steps` time steps.
pub fn evaluate(model: &mut Spikformer, data: &Dataset, steps: usize, batch_size: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty dataset".into()));
    }
    let mut correct = 0;
    for b in data.batches(batch_size, None) {
        let logits = model.predict(&b.images, steps)?;
        correct += count_correct(&logits, &b.labels);
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Owns the optimizer state and iteration counter across steps.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub optim: AdamW,
    pub iteration: usize,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let optim = AdamW::new(cfg.weight_decay as f32);
        Ok(Self { cfg, optim, iteration: 0 })
    }

    fn update(&mut self, store: &mut crate::nn::ParamStore, lr: f64, depth: usize) {
        clip_grad_norm(store, self.cfg.clip_norm as f32);
        match self.cfg.layer_decay {
            Some(f) => self.optim.step_scaled(store, lr as f32, |n| layer_decay_scale(n, depth, f as f32)),
            None => self.optim.step(store, lr as f32),
        }
        store.zero_grads();
        self.iteration += 1;
    }

    /// Forward, cross-entropy, backward and one optimizer update.
    pub fn train_step(&mut self, model: &mut Spikformer, batch: &Batch, lr: f64) -> Result<f32> {
        let steps = self.cfg.time_steps;
        let training = !self.cfg.freeze_encoder;
        let depth = model.cfg().depth;
        let loss = {
            let Spikformer { net, store } = &mut *model;
            let mut fx = Forward::new(store, training).with_grads(true);
            let logits = net.logits(&mut fx, &batch.images, steps)?;
            let loss = fx.tape.cross_entropy(logits, &batch.labels)?;
            let value = fx.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss {value} at iteration {}", self.iteration)));
            }
            fx.backward(loss)?;
            value
        };
        self.update(&mut model.store, lr, depth);
        Ok(loss)
    }

    /// Trains for `cfg.epochs`, reporting each epoch to `on_epoch`.
    pub fn fit(
        &mut self,
        model: &mut Spikformer,
        train: &Dataset,
        eval: Option<&Dataset>,
        mut on_epoch: impl FnMut(&EpochMetrics),
    ) -> Result<Vec<EpochMetrics>> {
        if train.is_empty() {
            return Err(Error::Data("empty training set".into()));
        }
        if self.cfg.freeze_encoder {
            let ids: Vec<_> = model.store.entries().filter(|(_, e)| !e.name.starts_with("head.")).map(|(id, _)| id).collect();
            for id in ids {
                model.store.set_frozen(id, true);
            }
        }
        let per_epoch = train.len().div_ceil(self.cfg.batch_size);
        let sched = Schedule::from_epochs(self.cfg.base_lr, self.cfg.min_lr, self.cfg.warmup_epochs, self.cfg.epochs, per_epoch);
        let mut history = Vec::new();
        for epoch in 0..self.cfg.epochs {
            let mut loss_sum = 0.0;
            let mut lr = 0.0;
            let batches = train.batches(self.cfg.batch_size, Some(self.cfg.seed.wrapping_add(epoch as u64)));
            for b in &batches {
                lr = sched.lr_at(self.iteration);
                loss_sum += self.train_step(model, b, lr)? as f64 * b.labels.len() as f64;
            }
            let steps = self.cfg.time_steps;
            let train_acc = evaluate(model, train, steps, self.cfg.batch_size)?;
            let eval_acc = eval.map(|d| evaluate(model, d, steps, self.cfg.batch_size)).transpose()?;
            let m = EpochMetrics { epoch: epoch + 1, lr, train_loss: loss_sum / train.len() as f64, train_acc: Some(train_acc), eval_acc };
            on_epoch(&m);
            history.push(m);
            if self.cfg.target_accuracy.is_some_and(|t| train_acc >= t) {
                break;
            }
        }
        Ok(history)
    }

    /// One masked-reconstruction update with freshly sampled masks.
    pub fn pretrain_step(&mut self, mae: &mut MaskedAutoencoder, images: &DenseTensor, ratio: f64, lr: f64) -> Result<f32> {
        let b = images.shape()[0];
        let seed = self.cfg.seed ^ (self.iteration as u64).wrapping_mul(0x2545_F491_4F6C_DD1D);
        let masks = sample_batch_masks(mae.cfg().grid(), ratio, seed, b)?;
        let steps = self.cfg.time_steps;
        let depth = mae.cfg().depth;
        let (net, decoder, store) = mae.parts_mut();
        let loss = {
            let mut fx = Forward::new(store, true);
            let out = masked_forward(net, decoder, &mut fx, images, &masks, steps)?;
            let value = fx.value(out.loss).data()[0];
            if !value.is_finite() {
                return Err(Error::Numeric(format!("non-finite reconstruction loss {value} at iteration {}", self.iteration)));
            }
            fx.backward(out.loss)?;
            value
        };
        self.update(store, lr, depth);
        Ok(loss)
    }

    /// Masked pretraining for `cfg.epochs` over `data` (labels unused).
    pub fn pretrain(
        &mut self,
        mae: &mut MaskedAutoencoder,
        data: &Dataset,
        ratio: f64,
        mut on_epoch: impl FnMut(&EpochMetrics),
    ) -> Result<Vec<EpochMetrics>> {
        if data.is_empty() {
            return Err(Error::Data("empty pretraining set".into()));
        }
        let per_epoch = data.len().div_ceil(self.cfg.batch_size);
        let sched = Schedule::from_epochs(self.cfg.base_lr, self.cfg.min_lr, self.cfg.warmup_epochs, self.cfg.epochs, per_epoch);
        let mut history = Vec::new();
        for epoch in 0..self.cfg.epochs {
            let mut loss_sum = 0.0;
            let mut lr = 0.0;
            for b in data.batches(self.cfg.batch_size, Some(self.cfg.seed.wrapping_add(epoch as u64))) {
                lr = sched.lr_at(self.iteration);
                loss_sum += self.pretrain_step(mae, &b.images, ratio, lr)? as f64 * b.labels.len() as f64;
            }
            let m = EpochMetrics { epoch: epoch + 1, lr, train_loss: loss_sum / data.len() as f64, train_acc: None, eval_acc: None };
            on_epoch(&m);
            history.push(m);
        }
        Ok(history)
    }
}
