mod common;

use common::{randn, randn_tensor, rng};
use serde_json::json;
use spikekit::architecture::{ModelConfig, Spikformer, StemConfig};
use spikekit::harness::{load_dataset, DatasetSpec};
use spikekit::nn::Forward;
use spikekit::pretrain::{
    encode_visible, finetune_handoff, level_masks, masked_count, reconstruction_loss, sample_batch_masks, sample_mask, DecoderConfig,
    MaskPyramid, MaskedAutoencoder,
};
use spikekit::tensor::{DenseTensor, SpikeTensor};
use spikekit::training::{evaluate, TrainConfig, Trainer};

/// Convolutional-stem model scaled to 64x64 inputs (4x4 token grid).
fn scs64() -> ModelConfig {
    let mut cfg = ModelConfig::v2(2, 64);
    cfg.heads = 2;
    cfg.image_size = [64, 64];
    cfg.num_classes = 3;
    cfg.time_steps = 2;
    cfg
}

fn small_decoder() -> DecoderConfig {
    DecoderConfig { depth: 1, dim: 32, heads: 2, mlp_ratio: 2 }
}

#[test]
fn every_patch_is_masked_three_quarters_of_the_time() {
    let draws = 10_000;
    let mut masked = [0u32; 196];
    for seed in 0..draws {
        let m = sample_mask([14, 14], 0.75, seed).unwrap();
        assert_eq!(m.num_masked(), 147);
        for i in m.masked_indices() {
            masked[i] += 1;
        }
    }
    for (i, &c) in masked.iter().enumerate() {
        let f = c as f64 / draws as f64;
        assert!((f - 0.75).abs() <= 0.02, "patch {i} masked with frequency {f}");
    }
}

#[test]
fn pyramid_levels_repeat_each_token_as_a_block() {
    let m = sample_mask([14, 14], 0.75, 11).unwrap();
    assert_eq!((m.num_masked(), m.num_visible()), (147, 49));
    assert_eq!(masked_count(196, 0.75), 147);
    for (level, &f) in m.levels.iter().zip(&MaskPyramid::LEVEL_FACTORS) {
        let side = 14 * f;
        assert_eq!(level.shape(), &[side, side]);
        for y in 0..side {
            for x in 0..side {
                assert_eq!(level.get(y, x), m.base.get(y / f, x / f), "factor {f} at ({y}, {x})");
            }
        }
    }
}

#[test]
fn stem_levels_follow_the_224_schedule() {
    let cfg = ModelConfig::v2(8, 384);
    let masks = sample_batch_masks(cfg.grid(), 0.75, 3, 2).unwrap();
    let levels = level_masks(&masks, &cfg.stem).unwrap();
    assert_eq!(levels.image.len(), 2 * 224 * 224);
    let sides: Vec<usize> = levels.blocks.iter().map(|l| ((l.len() / 2) as f64).sqrt() as usize).collect();
    assert_eq!(sides, vec![112, 56, 28, 14]);
    let visible = levels.blocks[3].iter().filter(|&&v| v == 1.0).count();
    assert_eq!(visible, 2 * 49);
    // Visible pixel fraction matches the token fraction at every level.
    for l in std::iter::once(&levels.image).chain(&levels.blocks) {
        assert_eq!(l.iter().filter(|&&v| v == 1.0).count() * 4, l.len());
    }
}

#[test]
fn loss_on_one_masked_patch_matches_hand_arithmetic() {
    // 4x4 single-channel image, 2x2 patches; only the top-right patch is masked.
    #[rustfmt::skip]
    let image = DenseTensor::new([1, 1, 4, 4], vec![
        0.0, 0.0, 1.0, 3.0,
        0.0, 0.0, 5.0, 7.0,
        2.0, 2.0, 4.0, 4.0,
        2.0, 2.0, 6.0, 6.0,
    ]).unwrap();
    let mask = MaskPyramid::from_base(SpikeTensor::from_bools([2, 2], &[true, false, true, true]).unwrap(), 0.25).unwrap();
    let mut pred = vec![9.0f32; 16];
    pred[4..8].copy_from_slice(&[-1.0, 0.0, 0.0, 1.0]);
    let mut store = spikekit::nn::ParamStore::new();
    let mut fx = Forward::new(&mut store, false);
    let p = fx.input(DenseTensor::new([1, 4, 4], pred).unwrap());
    let loss = reconstruction_loss(&mut fx, p, &image, 2, std::slice::from_ref(&mask)).unwrap();
    let got = fx.value(loss).data()[0] as f64;
    // Patch [1, 3, 5, 7]: mean 4, variance 5.
    let s = (5.0f64 + 1e-6).sqrt();
    let want = ((-1.0 + 3.0 / s).powi(2) + 2.0 * (1.0 / s).powi(2) + (1.0 - 3.0 / s).powi(2)) / 4.0;
    assert!((got - want).abs() < 1e-6, "{got} vs {want}");
}

/// Visible-token encoder output under `masks`, in training or eval mode.
fn encode(mae: &mut MaskedAutoencoder, images: &DenseTensor, masks: &[MaskPyramid], training: bool) -> Vec<f32> {
    let steps = mae.cfg().time_steps;
    let (net, _, store) = mae.parts_mut();
    let mut fx = Forward::new(store, training);
    let v = encode_visible(net, &mut fx, images, masks, steps).unwrap();
    fx.value(v).data().to_vec()
}

/// Batch-norm running statistics averaged over a few training-mode passes.
fn settle(mae: &mut MaskedAutoencoder, images: &DenseTensor) {
    let steps = mae.cfg().time_steps;
    let (net, _, store) = mae.parts_mut();
    for k in 0..3 {
        let mut fx = Forward::new(store, true).with_grads(false);
        fx.bn_momentum = Some(1.0 / (k + 1) as f32);
        net.features(&mut fx, images, steps, None, None).unwrap();
    }
}

#[test]
fn masked_pixels_never_reach_visible_tokens() {
    let cfg = scs64();
    let mut mae = MaskedAutoencoder::new(cfg.clone(), small_decoder(), 3).unwrap();
    let mut r = rng(4);
    let images = randn_tensor(&mut r, &[2, 3, 64, 64]);
    settle(&mut mae, &images);
    let masks = sample_batch_masks(cfg.grid(), 0.75, 5, 2).unwrap();
    let image_mask = level_masks(&masks, &cfg.stem).unwrap().image;
    let noise = randn(&mut r, images.numel());
    let perturb = |keep: f32| {
        DenseTensor::from_fn(images.shape().to_vec(), |i| {
            let (b, px) = (i / (3 * 4096), i % 4096);
            let visible = image_mask[b * 4096 + px];
            images.data()[i] + if visible == keep { 0.0 } else { 5.0 * noise[i] }
        })
    };
    // Eval first: training-mode passes move the running statistics.
    for training in [false, true] {
        let base = encode(&mut mae, &images, &masks, training);
        assert!(base.iter().any(|&v| v != 0.0), "encoder output is silent, training={training}");
        assert_eq!(base, encode(&mut mae, &perturb(1.0), &masks, training), "training={training}");
        assert_ne!(base, encode(&mut mae, &perturb(0.0), &masks, training), "visible pixels should matter");
    }
}

#[test]
fn all_visible_mask_equals_the_plain_forward() {
    let cfg = scs64();
    let mut mae = MaskedAutoencoder::new(cfg.clone(), small_decoder(), 6).unwrap();
    let images = randn_tensor(&mut rng(7), &[2, 3, 64, 64]);
    settle(&mut mae, &images);
    let masks = vec![MaskPyramid::all_visible(cfg.grid()); 2];
    for training in [true, false] {
        let masked = encode(&mut mae, &images, &masks, training);
        let (net, _, store) = mae.parts_mut();
        let mut fx = Forward::new(store, training);
        let v = net.features(&mut fx, &images, cfg.time_steps, None, None).unwrap();
        assert_eq!(masked, fx.value(v).data(), "training={training}");
    }
}

#[test]
fn masking_shrinks_encoder_work_in_proportion() {
    let cfg = scs64();
    let mut mae = MaskedAutoencoder::new(cfg.clone(), small_decoder(), 8).unwrap();
    let images = randn_tensor(&mut rng(9), &[1, 3, 64, 64]);
    settle(&mut mae, &images);
    let masked = mae.profile_encoder(&images, &sample_batch_masks(cfg.grid(), 0.75, 1, 1).unwrap(), 2).unwrap();
    let full = mae.profile_encoder(&images, &[MaskPyramid::all_visible(cfg.grid())], 2).unwrap();
    let mut blocks = 0;
    for rec in full.records().iter().filter(|r| r.layer.starts_with("blocks.") && r.elements > 0) {
        let m = masked.get(&rec.layer, rec.kind).unwrap();
        assert_eq!(m.elements * 4, rec.elements, "{}", rec.layer);
        blocks += 1;
    }
    assert!(blocks > 0);
    let (a, b) = (masked.totals(), full.totals());
    assert!(a.flops + a.sops < b.flops + b.sops, "{a:?} vs {b:?}");
}

#[test]
fn handoff_keeps_the_encoder_and_drops_the_decoder() {
    let cfg = scs64();
    let mae = MaskedAutoencoder::new(cfg.clone(), small_decoder(), 10).unwrap();
    let ckpt = mae.to_checkpoint(json!({}));
    assert!(ckpt.tensors.iter().any(|(n, _)| n.starts_with("decoder.")));
    let mut target = cfg.clone();
    target.num_classes = 5;
    let model = finetune_handoff(&ckpt, target, 11).unwrap();
    assert!(model.inventory().iter().all(|l| !l.name.starts_with("decoder")));
    assert!(model.store.entries().all(|(_, e)| !e.name.starts_with("decoder.")));
    for (_, e) in model.store.entries() {
        if e.name.starts_with("head.") {
            assert_eq!(e.value.shape().last(), Some(&5));
        } else {
            assert_eq!(Some(&e.value), ckpt.get(&e.name), "{}", e.name);
        }
    }
    let mut wider = cfg;
    wider.dim = 128;
    assert!(finetune_handoff(&ckpt, wider, 11).is_err());
}

#[test]
fn autoencoder_checkpoint_reconstructs_identically() {
    let cfg = scs64();
    let mut mae = MaskedAutoencoder::new(cfg.clone(), small_decoder(), 12).unwrap();
    let images = randn_tensor(&mut rng(13), &[2, 3, 64, 64]);
    settle(&mut mae, &images);
    let masks = sample_batch_masks(cfg.grid(), 0.75, 14, 2).unwrap();
    let (loss, recon) = mae.reconstruct(&images, &masks, 2).unwrap();
    let mut back = MaskedAutoencoder::from_checkpoint(&MaskedAutoencoder::to_checkpoint(&mae, json!({}))).unwrap();
    let (loss2, recon2) = back.reconstruct(&images, &masks, 2).unwrap();
    assert_eq!(loss.to_bits(), loss2.to_bits());
    assert_eq!(recon, recon2);
    assert_eq!(recon.shape(), images.shape());
}

#[test]
fn single_step_finetune_runs_at_more_steps() {
    let data = load_dataset(&DatasetSpec::synthetic(4, 15)).unwrap();
    let mut cfg = ModelConfig::spikformer_small(1, 32);
    cfg.stem = StemConfig::scs_small();
    cfg.num_classes = 3;
    cfg.time_steps = 1;
    let mut model = Spikformer::new(cfg, 16).unwrap();
    let tc = TrainConfig { epochs: 1, batch_size: 6, time_steps: 1, ..TrainConfig::default() };
    Trainer::new(tc).unwrap().fit(&mut model, &data, None, |_| {}).unwrap();
    for steps in [1, 2, 4] {
        let acc = evaluate(&mut model, &data, steps, 6).unwrap();
        assert!((0.0..=1.0).contains(&acc));
        let logits = model.predict(&data.select(&[0, 1]).images, steps).unwrap();
        assert_eq!(logits.shape(), &[2, 3]);
        assert!(logits.data().iter().all(|v| v.is_finite()));
    }
}
