//! Stems, encoder blocks and full Spikformer models.

mod checkpoint;
mod config;
mod count;
mod encoder;
mod model;
mod stem;

use serde::{Deserialize, Serialize};

pub use checkpoint::Checkpoint;
pub use config::{ModelConfig, ResidualMode, StemConfig, StemKind};
pub use count::param_count;
pub use encoder::{iand, join, EncoderBlock, Mlp};
pub use model::{replicate_over_time, Network, Spikformer};
pub use stem::{LevelMasks, Stem};

/// Name and kind of one layer, in execution order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerInfo {
    pub name: String,
    pub kind: String,
}

impl LayerInfo {
    pub fn new(name: &str, kind: &str) -> Self {
        Self { name: name.to_string(), kind: kind.to_string() }
    }
}
