//! Shared helpers for integration tests: seeded data, tiny model configs and
//! an independent f64 reference implementation used as a numeric oracle.
#![allow(dead_code)]

pub mod gradcheck;
pub mod oracle;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use spikekit::architecture::{ModelConfig, StemConfig};
use spikekit::tensor::DenseTensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()
}

pub fn randn_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> DenseTensor {
    let n = shape.iter().product();
    DenseTensor::new(shape.to_vec(), randn(rng, n)).unwrap()
}

pub fn bernoulli(rng: &mut ChaCha8Rng, n: usize, p: f64) -> Vec<f32> {
    (0..n).map(|_| rng.random_bool(p) as u8 as f32).collect()
}

/// `|a - n| / max(|a|, |n|)`, zero when both vanish.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale == 0.0 {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

/// `k` distinct indices below `n` (all of them when `n <= k`).
pub fn pick(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    if n <= k {
        return (0..n).collect();
    }
    rand::seq::index::sample(rng, n, k).into_vec()
}

/// Two-block, 8x8-input model small enough for brute-force oracles.
pub fn tiny_config(stem: StemConfig) -> ModelConfig {
    let mut cfg = ModelConfig::spikformer_small(2, 16);
    cfg.heads = 2;
    cfg.image_size = [8, 8];
    cfg.num_classes = 3;
    cfg.time_steps = 2;
    cfg.stem = stem;
    cfg
}

pub fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}
