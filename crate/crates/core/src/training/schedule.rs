use serde::{Deserialize, Serialize};

/// Linear warmup followed by a half cosine down to `min_lr`, updated every
/// iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub base_lr: f64,
    pub min_lr: f64,
    pub warmup_iters: usize,
    pub total_iters: usize,
}

impl Schedule {
    pub fn from_epochs(base_lr: f64, min_lr: f64, warmup_epochs: usize, epochs: usize, iters_per_epoch: usize) -> Self {
        let total_iters = epochs * iters_per_epoch;
        Self { base_lr, min_lr, warmup_iters: (warmup_epochs * iters_per_epoch).min(total_iters), total_iters }
    }

    /// Learning rate at iteration `it`; iterations past the horizon stay at
    /// the floor.
    pub fn lr_at(&self, it: usize) -> f64 {
        if it < self.warmup_iters {
            return self.base_lr * it as f64 / self.warmup_iters as f64;
        }
        let span = self.total_iters.saturating_sub(self.warmup_iters);
        if span == 0 {
            return self.base_lr;
        }
        let p = ((it - self.warmup_iters) as f64 / span as f64).min(1.0);
        self.min_lr + (self.base_lr - self.min_lr) * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
    }
}

/// Base learning rate scaled linearly with batch size from a reference of 512.
pub fn scaled_lr(reference: f64, batch: usize) -> f64 {
    reference * batch as f64 / 512.0
}
