use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::architecture::{ModelConfig, ResidualMode, StemConfig, StemKind};
use crate::attention::{AttentionVariant, ProductOrder};
use crate::error::{Error, Result};
use crate::pretrain::DecoderConfig;
use crate::training::TrainConfig;

use super::data::DatasetSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    #[default]
    Train,
    Pretrain,
    Finetune,
    Eval,
    Profile,
    Reconstruct,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Train => "train",
            Task::Pretrain => "pretrain",
            Task::Finetune => "finetune",
            Task::Eval => "eval",
            Task::Profile => "profile",
            Task::Reconstruct => "reconstruct",
        }
    }
}

/// Model shape as written in run files; expanded by [`ModelSpec::to_config`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSpec {
    pub depth: usize,
    pub dim: usize,
    /// Small-input stem (CIFAR-sized images).
    pub small: bool,
    pub stem: StemKind,
    pub variant: AttentionVariant,
    pub order: ProductOrder,
    pub residual: ResidualMode,
    pub time_steps: usize,
    pub learnable_scale: bool,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            depth: 2,
            dim: 64,
            small: true,
            stem: StemKind::Sps,
            variant: AttentionVariant::Ssa,
            order: ProductOrder::QkFirst,
            residual: ResidualMode::Add,
            time_steps: 4,
            learnable_scale: false,
        }
    }
}

impl ModelSpec {
    /// Applies a `spikformer-L-D` name.
    pub fn set_name(&mut self, name: &str) -> Result<()> {
        let (depth, dim) = ModelConfig::parse_name(name)?;
        self.depth = depth;
        self.dim = dim;
        Ok(())
    }

    pub fn to_config(&self, num_classes: usize, image_size: [usize; 2]) -> Result<ModelConfig> {
        let mut cfg = if self.small {
            ModelConfig::spikformer_small(self.depth, self.dim)
        } else {
            ModelConfig::spikformer(self.depth, self.dim)
        };
        cfg.stem = StemConfig::of_kind(self.stem, self.small);
        cfg.variant = self.variant;
        cfg.order = self.order;
        cfg.residual = self.residual;
        cfg.time_steps = self.time_steps;
        cfg.learnable_scale = self.learnable_scale;
        cfg.num_classes = num_classes;
        cfg.image_size = image_size;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainSpec {
    pub mask_ratio: f64,
    pub time_steps: usize,
    pub epochs: usize,
    pub decoder: DecoderConfig,
    /// Number of image triplets written by `reconstruct`.
    pub dump_images: usize,
}

impl Default for PretrainSpec {
    fn default() -> Self {
        Self { mask_ratio: 0.75, time_steps: 1, epochs: 5, decoder: DecoderConfig::default(), dump_images: 4 }
    }
}

/// Everything needed to reproduce one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub task: Task,
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Input checkpoint for finetune, eval, profile and reconstruct.
    pub checkpoint: Option<PathBuf>,
    /// Time steps evaluated by `eval`; empty means the model's own.
    pub eval_time_steps: Vec<usize>,
    pub model: ModelSpec,
    pub data: DatasetSpec,
    pub eval_data: Option<DatasetSpec>,
    pub train: TrainConfig,
    pub pretrain: PretrainSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: Task::Train,
            seed: 0,
            out_dir: PathBuf::from("runs"),
            checkpoint: None,
            eval_time_steps: Vec::new(),
            model: ModelSpec::default(),
            data: DatasetSpec::synthetic(32, 1),
            eval_data: Some(DatasetSpec::synthetic(16, 1001)),
            train: TrainConfig { base_lr: 2e-3, min_lr: 1e-5, warmup_epochs: 2, ..TrainConfig::default() },
            pretrain: PretrainSpec::default(),
        }
    }
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::synthetic(32, 1)
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Usage(format!("malformed config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Stable 64-bit FNV-1a hash of the serialized configuration.
    pub fn hash(&self) -> u64 {
        self.to_toml().bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
    }

    /// `<out_dir>/<unix-seconds>-<hash>`.
    pub fn run_dir(&self) -> PathBuf {
        let secs = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        self.out_dir.join(format!("{secs}-{:016x}", self.hash()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn partial_files_fill_defaults() {
        let c = RunConfig::from_toml("task = \"profile\"\n[model]\nvariant = \"softmax\"\ndim = 32\n").unwrap();
        assert_eq!(c.task, Task::Profile);
        assert_eq!(c.model.variant, AttentionVariant::Softmax);
        assert_eq!(c.model.dim, 32);
        assert_eq!(c.model.depth, 2);
    }

    #[test]
    fn unknown_keys_are_usage_errors() {
        assert!(matches!(RunConfig::from_toml("epochz = 3"), Err(Error::Usage(_))));
        assert!(matches!(RunConfig::from_toml("task = 5"), Err(Error::Usage(_))));
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }
}
