mod common;

use common::{randn_tensor, rng, tiny_config};
use spikekit::architecture::{param_count, Checkpoint, ModelConfig, ResidualMode, Spikformer, StemConfig};
use spikekit::attention::ProductOrder;
use spikekit::nn::{Forward, SpikeMode};
use spikekit::tensor::DenseTensor;

/// Sum of declared trainable extents in a freshly built store.
fn built_count(cfg: &ModelConfig) -> usize {
    let m = Spikformer::new(cfg.clone(), 0).unwrap();
    m.store.entries().filter(|(_, e)| e.trainable).map(|(_, e)| e.value.numel()).sum()
}

#[test]
fn param_formula_matches_built_extents() {
    let mut learnable = ModelConfig::spikformer_small(2, 64);
    learnable.learnable_scale = true;
    let mut scs_small = ModelConfig::spikformer_small(3, 96);
    scs_small.stem = StemConfig::scs_small();
    let mut no_rpe = ModelConfig::spikformer_small(1, 32);
    no_rpe.stem.rpe = false;
    for cfg in [
        ModelConfig::spikformer(8, 512),
        ModelConfig::spikformer_small(4, 384),
        ModelConfig::v2(8, 384),
        learnable,
        scs_small,
        no_rpe,
        tiny_config(StemConfig::sps_small()),
    ] {
        assert_eq!(param_count(&cfg), built_count(&cfg), "{cfg:?}");
    }
}

#[test]
fn reference_sizes() {
    let within = |n: usize, target: f64, tol: f64| ((n as f64 - target) / target).abs() <= tol;
    let mut cifar100 = ModelConfig::spikformer_small(4, 384);
    cifar100.num_classes = 100;
    for (cfg, target) in [
        (ModelConfig::spikformer(8, 512), 29.68e6),
        (ModelConfig::spikformer_small(4, 384), 9.32e6),
        (cifar100, 9.32e6),
        (ModelConfig::v2(8, 384), 29.11e6),
    ] {
        let n = param_count(&cfg);
        assert!(within(n, target, 0.02), "{n} vs {target}");
    }
}

fn stem_maps(cfg: ModelConfig, names: &[String]) -> Vec<Vec<usize>> {
    let [h, w] = cfg.image_size;
    let mut m = Spikformer::new(cfg, 1).unwrap();
    let x = randn_tensor(&mut rng(2), &[1, 3, h, w]);
    let (_, trace) = m.trace(&x, 1, SpikeMode::Hard).unwrap();
    names.iter().map(|n| trace.find(n).unwrap_or_else(|| panic!("{n} not traced")).value.shape().to_vec()).collect()
}

#[test]
fn convolutional_stem_halves_224_down_to_14() {
    let mut cfg = ModelConfig::v2(1, 64);
    cfg.heads = 2;
    let names: Vec<String> = (0..4).map(|i| format!("stem.{i}.project.lif")).collect();
    let shapes = stem_maps(cfg.clone(), &names);
    let sides: Vec<usize> = shapes.iter().map(|s| s[2]).collect();
    assert_eq!(sides, vec![112, 56, 28, 14]);
    assert!(shapes.iter().all(|s| s[2] == s[3]));
    assert_eq!(cfg.num_tokens(), 196);
    let tokens = stem_maps(cfg, &["stem.tokens".to_string()]);
    assert_eq!(tokens[0], vec![1, 196, 64]);
}

#[test]
fn small_patch_stem_pools_only_in_the_last_two_blocks() {
    let mut cfg = ModelConfig::spikformer_small(1, 64);
    cfg.heads = 2;
    let names: Vec<String> = (0..4).map(|i| format!("stem.{i}.lif")).chain(["stem.tokens".to_string()]).collect();
    let shapes = stem_maps(cfg, &names);
    let sides: Vec<usize> = shapes[..4].iter().map(|s| s[2]).collect();
    // Pooling follows the neuron, so the traced maps are pre-pool.
    assert_eq!(sides, vec![32, 32, 32, 16]);
    assert_eq!(shapes[4], vec![1, 64, 64]);
}

#[test]
fn position_embedding_depends_on_the_input() {
    let cfg = tiny_config(StemConfig::sps_small());
    let mut m = Spikformer::new(cfg, 4).unwrap();
    let mut r = rng(5);
    m.calibrate(&randn_tensor(&mut r, &[8, 3, 8, 8]), 2, 2).unwrap();
    let x = randn_tensor(&mut r, &[1, 3, 8, 8]);
    // Circular shift by one token (2 pixels) along the width.
    let shifted = DenseTensor::from_fn([1, 3, 8, 8], |i| {
        let (row, col) = (i / 8, i % 8);
        x.data()[row * 8 + (col + 6) % 8]
    });
    let (_, a) = m.trace(&x, 2, SpikeMode::Hard).unwrap();
    let (_, b) = m.trace(&shifted, 2, SpikeMode::Hard).unwrap();
    let pa = &a.find("rpe.lif").unwrap().value;
    let pb = &b.find("rpe.lif").unwrap().value;
    assert_eq!(pa.shape(), pb.shape());
    assert_ne!(pa.data(), pb.data());
    let other = randn_tensor(&mut r, &[1, 3, 8, 8]);
    let (_, c) = m.trace(&other, 2, SpikeMode::Hard).unwrap();
    assert_ne!(pa.data(), c.find("rpe.lif").unwrap().value.data());
}

#[test]
fn pooled_features_ignore_duplicated_time_steps() {
    let cfg = tiny_config(StemConfig::sps_small());
    let mut m = Spikformer::new(cfg.clone(), 6).unwrap();
    let mut r = rng(7);
    let (t, b, n, d) = (2, 3, cfg.num_tokens(), cfg.dim);
    let spikes = DenseTensor::new([t * b, n, d], common::bernoulli(&mut r, t * b * n * d, 0.3)).unwrap();
    let mut doubled = spikes.data().to_vec();
    doubled.extend_from_slice(spikes.data());
    let doubled = DenseTensor::new([2 * t * b, n, d], doubled).unwrap();
    let Spikformer { net, store } = &mut m;
    let mut fx = Forward::new(store, false);
    let a = fx.input(spikes);
    let a = net.classify(&mut fx, a, t).unwrap();
    let c = fx.input(doubled);
    let c = net.classify(&mut fx, c, 2 * t).unwrap();
    assert_eq!(fx.value(a).data(), fx.value(c).data());
}

#[test]
fn product_order_does_not_change_logits() {
    for residual in [ResidualMode::Add, ResidualMode::Iand] {
        let mut cfg = tiny_config(StemConfig::sps_small());
        cfg.residual = residual;
        let mut qk = Spikformer::new(cfg.clone(), 8).unwrap();
        let mut kv = Spikformer::new(ModelConfig { order: ProductOrder::KvFirst, ..cfg }, 8).unwrap();
        let x = randn_tensor(&mut rng(9), &[4, 3, 8, 8]);
        let a = qk.predict(&x, 2).unwrap();
        let b = kv.predict(&x, 2).unwrap();
        assert_eq!(a.data(), b.data(), "{residual:?}");
    }
}

#[test]
fn checkpoint_rejects_a_different_shape() {
    let m = Spikformer::new(tiny_config(StemConfig::sps_small()), 0).unwrap();
    let mut ck = m.to_checkpoint(serde_json::Value::Null);
    let bytes = ck.to_bytes();
    assert!(Spikformer::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).is_ok());
    let (_, t) = ck.tensors.iter_mut().find(|(n, _)| n == "head.weight").unwrap();
    *t = DenseTensor::zeros([1, 1]);
    assert!(Spikformer::from_checkpoint(&ck).is_err());
}
