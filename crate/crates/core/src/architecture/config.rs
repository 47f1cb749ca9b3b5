use serde::{Deserialize, Serialize};

use crate::attention::{AttentionConfig, AttentionVariant, ProductOrder};
use crate::error::{Error, Result};
use crate::neuron::LifConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StemKind {
    /// Conv, BN, neuron, then max-pool per block.
    Sps,
    /// Stride-2 conv per block followed by an expand/project conv pair.
    Scs,
}

impl StemKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sps" => Ok(StemKind::Sps),
            "scs" => Ok(StemKind::Scs),
            other => Err(Error::config(format!("unknown stem kind {other:?}"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            StemKind::Sps => "sps",
            StemKind::Scs => "scs",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StemConfig {
    pub kind: StemKind,
    /// Per block: halve the spatial extent (pool for SPS, stride-2 conv for SCS).
    pub downsample: Vec<bool>,
    /// Expansion of the SCS conv pair.
    pub mlp_ratio: usize,
    /// Conv-generated position embedding joined onto the stem output.
    pub rpe: bool,
}

impl StemConfig {
    pub fn sps() -> Self {
        Self { kind: StemKind::Sps, downsample: vec![true; 4], mlp_ratio: 4, rpe: true }
    }

    /// Small-input SPS: the first two blocks keep full resolution.
    pub fn sps_small() -> Self {
        Self { downsample: vec![false, false, true, true], ..Self::sps() }
    }

    pub fn scs() -> Self {
        Self { kind: StemKind::Scs, downsample: vec![true; 4], mlp_ratio: 4, rpe: false }
    }

    pub fn scs_small() -> Self {
        Self { downsample: vec![true, true, false, false], ..Self::scs() }
    }

    pub fn of_kind(kind: StemKind, small: bool) -> Self {
        match (kind, small) {
            (StemKind::Sps, false) => Self::sps(),
            (StemKind::Sps, true) => Self::sps_small(),
            (StemKind::Scs, false) => Self::scs(),
            (StemKind::Scs, true) => Self::scs_small(),
        }
    }

    pub fn blocks(&self) -> usize {
        self.downsample.len()
    }

    /// Side of the square pixel patch each token covers.
    pub fn patch_size(&self) -> usize {
        1 << self.downsample.iter().filter(|&&d| d).count()
    }

    /// Output channels per block, doubling up to `dim`.
    pub fn channels(&self, dim: usize) -> Vec<usize> {
        let b = self.blocks();
        (0..b).map(|i| dim >> (b - 1 - i)).collect()
    }

    /// Cumulative downsampling after each block.
    pub fn strides(&self) -> Vec<usize> {
        let mut s = 1;
        self.downsample
            .iter()
            .map(|&d| {
                if d {
                    s *= 2;
                }
                s
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ResidualMode {
    /// Integer sum of residual and sublayer spikes.
    #[default]
    Add,
    /// `(not new) and residual`, which keeps activations binary.
    Iand,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub time_steps: usize,
    pub residual: ResidualMode,
    pub num_classes: usize,
    pub image_size: [usize; 2],
    pub in_channels: usize,
    pub stem: StemConfig,
    pub variant: AttentionVariant,
    pub order: ProductOrder,
    pub scale: f32,
    pub learnable_scale: bool,
    pub lif: LifConfig,
}

impl ModelConfig {
    /// ImageNet-style model: 224x224 input, 16x16 patches.
    pub fn spikformer(depth: usize, dim: usize) -> Self {
        Self {
            depth,
            dim,
            heads: (dim / 64).max(1),
            mlp_ratio: 4,
            time_steps: 4,
            residual: ResidualMode::Add,
            num_classes: 1000,
            image_size: [224, 224],
            in_channels: 3,
            stem: StemConfig::sps(),
            variant: AttentionVariant::Ssa,
            order: ProductOrder::QkFirst,
            scale: 0.125,
            learnable_scale: false,
            lif: LifConfig::default(),
        }
    }

    /// 32x32 input, 4x4 patches, 10 classes.
    pub fn spikformer_small(depth: usize, dim: usize) -> Self {
        Self {
            heads: (dim / 32).max(1),
            num_classes: 10,
            image_size: [32, 32],
            stem: StemConfig::sps_small(),
            ..Self::spikformer(depth, dim)
        }
    }

    /// Convolutional-stem model at ImageNet settings.
    pub fn v2(depth: usize, dim: usize) -> Self {
        Self { stem: StemConfig::scs(), ..Self::spikformer(depth, dim) }
    }

    /// Parses `spikformer-L-D`.
    pub fn parse_name(name: &str) -> Result<(usize, usize)> {
        let parts: Vec<&str> = name.split('-').collect();
        match parts.as_slice() {
            [p, l, d] if p.eq_ignore_ascii_case("spikformer") => {
                let l = l.parse().map_err(|_| Error::config(format!("bad depth in {name:?}")))?;
                let d = d.parse().map_err(|_| Error::config(format!("bad dim in {name:?}")))?;
                Ok((l, d))
            }
            _ => Err(Error::config(format!("model name {name:?} is not spikformer-L-D"))),
        }
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            dim: self.dim,
            heads: self.heads,
            scale: self.scale,
            learnable_scale: self.learnable_scale,
            variant: self.variant,
            order: self.order,
        }
    }

    pub fn patch_size(&self) -> usize {
        self.stem.patch_size()
    }

    pub fn grid(&self) -> [usize; 2] {
        let p = self.patch_size();
        [self.image_size[0] / p, self.image_size[1] / p]
    }

    pub fn num_tokens(&self) -> usize {
        let [h, w] = self.grid();
        h * w
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.time_steps == 0 || self.num_classes == 0 || self.in_channels == 0 {
            return Err(Error::config("depth, time steps, classes and channels must be positive"));
        }
        if self.stem.blocks() == 0 || self.stem.mlp_ratio == 0 || self.mlp_ratio == 0 {
            return Err(Error::config("stem needs at least one block and positive expansion ratios"));
        }
        let b = self.stem.blocks();
        if self.dim % (1 << (b - 1)) != 0 || self.dim >> (b - 1) == 0 {
            return Err(Error::config(format!("dim {} cannot be halved {} times", self.dim, b - 1)));
        }
        let p = self.patch_size();
        if self.image_size[0] % p != 0 || self.image_size[1] % p != 0 {
            return Err(Error::dim(format!("image {:?} is not divisible by patch {p}", self.image_size)));
        }
        self.attention().validate()?;
        self.lif.validate()
    }
}
