use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::architecture::{LevelMasks, StemConfig};
use crate::error::{Error, Result};
use crate::tensor::{upsample_nearest, SpikeTensor};

/// Token-grid mask (1 = visible) and its nearest-neighbor upsamplings.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPyramid {
    pub base: SpikeTensor,
    pub ratio: f64,
    /// Upsamplings of `base` by [`MaskPyramid::LEVEL_FACTORS`].
    pub levels: Vec<SpikeTensor>,
}

/// Number of masked tokens for `n` tokens at `ratio`.
pub fn masked_count(n: usize, ratio: f64) -> usize {
    (ratio * n as f64).round() as usize
}

impl MaskPyramid {
    pub const LEVEL_FACTORS: [usize; 4] = [8, 4, 2, 1];

    pub fn from_base(base: SpikeTensor, ratio: f64) -> Result<Self> {
        let levels = Self::LEVEL_FACTORS.iter().map(|&f| upsample_nearest(&base, f)).collect::<Result<_>>()?;
        Ok(Self { base, ratio, levels })
    }

    /// Mask with every token visible.
    pub fn all_visible(grid: [usize; 2]) -> Self {
        Self::from_base(SpikeTensor::ones(grid.to_vec()), 0.0).expect("valid grid")
    }

    pub fn grid(&self) -> [usize; 2] {
        [self.base.shape()[0], self.base.shape()[1]]
    }

    pub fn num_tokens(&self) -> usize {
        self.base.numel()
    }

    pub fn num_visible(&self) -> usize {
        self.base.count_ones() as usize
    }

    pub fn num_masked(&self) -> usize {
        self.num_tokens() - self.num_visible()
    }

    /// Visible token indices in row-major order.
    pub fn visible_indices(&self) -> Vec<usize> {
        (0..self.num_tokens()).filter(|&i| self.base.get_flat(i)).collect()
    }

    pub fn masked_indices(&self) -> Vec<usize> {
        (0..self.num_tokens()).filter(|&i| !self.base.get_flat(i)).collect()
    }

    /// Mask upsampled by `factor` as 0/1 floats.
    pub fn upsampled(&self, factor: usize) -> Result<Vec<f32>> {
        Ok(upsample_nearest(&self.base, factor)?.to_values())
    }
}

/// Uniformly random mask over an `[h, w]` token grid, deterministic in `seed`.
pub fn sample_mask(grid: [usize; 2], ratio: f64, seed: u64) -> Result<MaskPyramid> {
    let n = grid[0] * grid[1];
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::config(format!("mask ratio must lie in (0, 1), got {ratio}")));
    }
    let masked = masked_count(n, ratio);
    if masked == 0 || masked >= n {
        return Err(Error::config(format!("ratio {ratio} over {n} tokens masks {masked}; need at least one masked and one visible")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut base = SpikeTensor::ones(grid.to_vec());
    for i in index::sample(&mut rng, n, masked) {
        base.set_flat(i, false);
    }
    MaskPyramid::from_base(base, ratio)
}

/// One mask per batch item, seeded from `seed`.
pub fn sample_batch_masks(grid: [usize; 2], ratio: f64, seed: u64, batch: usize) -> Result<Vec<MaskPyramid>> {
    (0..batch)
        .map(|b| sample_mask(grid, ratio, seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(b as u64)))
        .collect()
}

/// Stem-stage masks for a batch: the image level plus one level per stem
/// block, each at that stage's resolution.
pub fn level_masks(masks: &[MaskPyramid], stem: &StemConfig) -> Result<LevelMasks> {
    let patch = stem.patch_size();
    let stage = |factor: usize| -> Result<Vec<f32>> {
        let mut out = Vec::new();
        for m in masks {
            out.extend(m.upsampled(factor)?);
        }
        Ok(out)
    };
    let image = stage(patch)?;
    let blocks = stem.strides().iter().map(|&s| stage(patch / s)).collect::<Result<_>>()?;
    Ok(LevelMasks { image, blocks })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn imagenet_counts() {
        let m = sample_mask([14, 14], 0.75, 7).unwrap();
        assert_eq!(m.num_masked(), 147);
        assert_eq!(m.num_visible(), 49);
        assert_eq!(m.visible_indices().len(), 49);
    }

    #[test]
    fn deterministic_under_seed() {
        assert_eq!(sample_mask([8, 8], 0.5, 3).unwrap(), sample_mask([8, 8], 0.5, 3).unwrap());
        assert_ne!(sample_mask([8, 8], 0.5, 3).unwrap(), sample_mask([8, 8], 0.5, 4).unwrap());
    }

    #[test]
    fn degenerate_ratios_rejected() {
        assert!(sample_mask([4, 4], 0.0, 0).is_err());
        assert!(sample_mask([4, 4], 0.01, 0).is_err());
        assert!(sample_mask([4, 4], 1.0, 0).is_err());
        assert!(sample_mask([4, 4], 0.99, 0).is_err());
    }

    #[test]
    fn level_resolutions_follow_the_stem() {
        let m = sample_mask([2, 2], 0.5, 0).unwrap();
        let l = level_masks(&[m], &StemConfig::scs()).unwrap();
        assert_eq!(l.image.len(), 32 * 32);
        let sizes: Vec<usize> = l.blocks.iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![16 * 16, 8 * 8, 4 * 4, 2 * 2]);
    }
}
