//! Masked-image pretraining: token masks, a float decoder, reconstruction
//! loss and the hand-off of a pretrained encoder to classification.

mod decoder;
mod mask;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use crate::architecture::{Checkpoint, LayerInfo, ModelConfig, Network, Spikformer, StemKind};
use crate::error::{Error, Result};
use crate::nn::{Forward, ParamStore};
use crate::profiler::OpLedger;
use crate::tensor::{DenseTensor, Var};

pub use decoder::{sincos_positions, Decoder, DecoderConfig};
pub use mask::{level_masks, masked_count, sample_batch_masks, sample_mask, MaskPyramid};

/// Normalization floor for per-patch target standardization.
pub const PATCH_NORM_EPS: f32 = 1e-6;

/// `[B, C, H, W]` images to `[B, N, patch * patch * C]` rows in row-major
/// token order; each row is laid out (row, column, channel).
pub fn patchify(images: &DenseTensor, patch: usize) -> Result<DenseTensor> {
    let [b, c, h, w] = <[usize; 4]>::try_from(images.shape())
        .map_err(|_| Error::dim(format!("patchify expects [B,C,H,W], got {:?}", images.shape())))?;
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::dim(format!("{h}x{w} image is not a multiple of patch {patch}")));
    }
    let (gh, gw) = (h / patch, w / patch);
    let x = images.data();
    let mut out = Vec::with_capacity(images.numel());
    for bi in 0..b {
        for ty in 0..gh {
            for tx in 0..gw {
                for py in 0..patch {
                    for px in 0..patch {
                        for ci in 0..c {
                            out.push(x[((bi * c + ci) * h + ty * patch + py) * w + tx * patch + px]);
                        }
                    }
                }
            }
        }
    }
    DenseTensor::new([b, gh * gw, patch * patch * c], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify(rows: &DenseTensor, patch: usize, channels: usize, grid: [usize; 2]) -> Result<DenseTensor> {
    let p = patch * patch * channels;
    let [b, n, pp] = <[usize; 3]>::try_from(rows.shape()).map_err(|_| Error::dim("unpatchify expects [B,N,P]"))?;
    if pp != p || n != grid[0] * grid[1] {
        return Err(Error::dim(format!("rows {:?} do not match patch {patch}, {channels} channels, grid {grid:?}", rows.shape())));
    }
    let (h, w) = (grid[0] * patch, grid[1] * patch);
    let mut out = vec![0.0; b * channels * h * w];
    let r = rows.data();
    let mut i = 0;
    for bi in 0..b {
        for ty in 0..grid[0] {
            for tx in 0..grid[1] {
                for py in 0..patch {
                    for px in 0..patch {
                        for ci in 0..channels {
                            out[((bi * channels + ci) * h + ty * patch + py) * w + tx * patch + px] = r[i];
                            i += 1;
                        }
                    }
                }
            }
        }
    }
    DenseTensor::new([b, channels, h, w], out)
}

/// Standardizes each row (patch) to zero mean and unit variance.
pub fn normalize_patches(rows: &DenseTensor) -> DenseTensor {
    let p = *rows.shape().last().unwrap_or(&1);
    let mut out = rows.clone();
    for row in out.data_mut().chunks_mut(p.max(1)) {
        let mean = row.iter().sum::<f32>() / p as f32;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / p as f32;
        let inv = 1.0 / (var + PATCH_NORM_EPS).sqrt();
        for v in row {
            *v = (*v - mean) * inv;
        }
    }
    out
}

/// Mean squared error on masked patches against per-patch normalized pixels.
pub fn reconstruction_loss(fx: &mut Forward<'_>, pred: Var, images: &DenseTensor, patch: usize, masks: &[MaskPyramid]) -> Result<Var> {
    let target = normalize_patches(&patchify(images, patch)?);
    let weight: Vec<f32> = masks
        .iter()
        .flat_map(|m| (0..m.num_tokens()).map(move |i| if m.base.get_flat(i) { 0.0 } else { 1.0 }))
        .collect();
    fx.tape.masked_mse(pred, &target, &weight)
}

/// Output of one masked forward pass.
pub struct MaskedOutput {
    pub loss: Var,
    pub pred: Var,
}

/// Spiking encoder (SCS stem) and float decoder sharing one parameter store.
#[derive(Debug, Clone)]
pub struct MaskedAutoencoder {
    pub net: Network,
    pub decoder: Decoder,
    pub store: ParamStore,
}

impl MaskedAutoencoder {
    pub fn new(cfg: ModelConfig, decoder: DecoderConfig, seed: u64) -> Result<Self> {
        if cfg.stem.kind != StemKind::Scs {
            return Err(Error::Unsupported("masked pretraining requires the SCS stem".into()));
        }
        let mut store = ParamStore::new();
        let net = Network::build(&cfg, &mut store, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xDEC0_DE);
        let p = cfg.patch_size();
        let decoder = Decoder::new(&mut store, decoder, cfg.dim, cfg.grid(), p * p * cfg.in_channels, &mut rng)?;
        Ok(Self { net, decoder, store })
    }

    pub fn cfg(&self) -> &ModelConfig {
        &self.net.cfg
    }

    /// Decoder parameter count.
    pub fn decoder_params(&self) -> usize {
        self.decoder.num_params()
    }

    pub fn inventory(&self) -> Vec<LayerInfo> {
        let mut out = self.net.inventory();
        self.decoder.inventory(&mut out);
        out
    }

    /// Layer graphs alongside mutable parameters, for building a pass.
    pub fn parts_mut(&mut self) -> (&Network, &Decoder, &mut ParamStore) {
        (&self.net, &self.decoder, &mut self.store)
    }

    /// Eval-mode loss and reconstructed images `[B, C, H, W]`, mapped back
    /// to input units with each original patch's statistics.
    pub fn reconstruct(&mut self, images: &DenseTensor, masks: &[MaskPyramid], steps: usize) -> Result<(f32, DenseTensor)> {
        let mut fx = Forward::new(&mut self.store, false);
        let out = masked_forward(&self.net, &self.decoder, &mut fx, images, masks, steps)?;
        let loss = fx.value(out.loss).data()[0];
        let pred = fx.value(out.pred).clone();
        let cfg = &self.net.cfg;
        let pred = restore_patch_stats(&pred, &patchify(images, cfg.patch_size())?)?;
        Ok((loss, unpatchify(&pred, cfg.patch_size(), cfg.in_channels, cfg.grid())?))
    }

    /// Eval-mode encoder op counts under `masks`.
    pub fn profile_encoder(&mut self, images: &DenseTensor, masks: &[MaskPyramid], steps: usize) -> Result<OpLedger> {
        let mut fx = Forward::new(&mut self.store, false).with_ledger();
        encode_visible(&self.net, &mut fx, images, masks, steps)?;
        Ok(fx.ledger.take().expect("ledger enabled"))
    }

    /// Encoder (and unused head) as a classification model.
    pub fn encoder_model(&self) -> Result<Spikformer> {
        let mut store = ParamStore::new();
        let net = Network::build(&self.net.cfg, &mut store, 0)?;
        let names: Vec<String> = store.entries().map(|(_, e)| e.name.clone()).collect();
        for name in names {
            let src = self.store.by_name(&name).expect("same layout").clone();
            *store.by_name_mut(&name).expect("same layout") = src;
        }
        Ok(Spikformer { net, store })
    }

    /// Checkpoint with every encoder and decoder tensor; the decoder shape
    /// is stored under `meta.decoder`.
    pub fn to_checkpoint(&self, meta: Value) -> Checkpoint {
        let mut meta = match meta {
            Value::Object(m) => m,
            Value::Null => serde_json::Map::new(),
            other => serde_json::Map::from_iter([("user".to_string(), other)]),
        };
        meta.insert("decoder".into(), serde_json::to_value(self.decoder.cfg).expect("decoder config serializes"));
        Checkpoint {
            config: serde_json::to_value(self.cfg()).expect("config serializes"),
            meta: Value::Object(meta),
            tensors: self.store.entries().map(|(_, e)| (e.name.clone(), e.value.clone())).collect(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let cfg = ckpt.model_config()?;
        let dec = ckpt.meta.get("decoder").ok_or_else(|| Error::Load("checkpoint has no decoder".into()))?;
        let dec: DecoderConfig = serde_json::from_value(dec.clone()).map_err(|e| Error::Load(format!("decoder config: {e}")))?;
        let mut mae = Self::new(cfg, dec, 0)?;
        if mae.store.len() != ckpt.tensors.len() {
            return Err(Error::Load(format!("checkpoint has {} tensors, autoencoder expects {}", ckpt.tensors.len(), mae.store.len())));
        }
        for (name, src) in &ckpt.tensors {
            let dst = mae.store.by_name_mut(name).ok_or_else(|| Error::Load(format!("unexpected tensor {name}")))?;
            if dst.shape() != src.shape() {
                return Err(Error::Load(format!("tensor {name}: shape {:?} vs {:?}", src.shape(), dst.shape())));
            }
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(mae)
    }
}

/// Maps per-patch normalized predictions back to pixel units using the mean
/// and spread of the matching `reference` patches.
pub fn restore_patch_stats(pred: &DenseTensor, reference: &DenseTensor) -> Result<DenseTensor> {
    if pred.shape() != reference.shape() {
        return Err(Error::dim(format!("{:?} vs {:?}", pred.shape(), reference.shape())));
    }
    let p = *pred.shape().last().unwrap_or(&1);
    let mut out = pred.clone();
    for (row, r) in out.data_mut().chunks_mut(p.max(1)).zip(reference.data().chunks(p.max(1))) {
        let mean = r.iter().sum::<f32>() / p as f32;
        let std = (r.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / p as f32 + PATCH_NORM_EPS).sqrt();
        row.iter_mut().for_each(|v| *v = *v * std + mean);
    }
    Ok(out)
}

/// Encodes, decodes and scores one batch under `masks` (one per item).
pub fn masked_forward(
    net: &Network,
    decoder: &Decoder,
    fx: &mut Forward<'_>,
    images: &DenseTensor,
    masks: &[MaskPyramid],
    steps: usize,
) -> Result<MaskedOutput> {
    let latent = encode_visible(net, fx, images, masks, steps)?;
    let visible: Vec<Vec<usize>> = masks.iter().map(MaskPyramid::visible_indices).collect();
    let pred = decoder.forward(fx, latent, &visible, steps)?;
    let loss = reconstruction_loss(fx, pred, images, net.cfg.patch_size(), masks)?;
    Ok(MaskedOutput { loss, pred })
}

/// Runs the SCS stem under the level masks and keeps only visible tokens in
/// the encoder blocks: `[steps * B, Nv, D]`.
pub fn encode_visible(net: &Network, fx: &mut Forward<'_>, images: &DenseTensor, masks: &[MaskPyramid], steps: usize) -> Result<Var> {
    if net.cfg.stem.kind != StemKind::Scs {
        return Err(Error::Unsupported("token masking requires the SCS stem".into()));
    }
    let grid = net.cfg.grid();
    if let Some(m) = masks.iter().find(|m| m.grid() != grid) {
        return Err(Error::dim(format!("mask grid {:?} does not match token grid {grid:?}", m.grid())));
    }
    let levels = level_masks(masks, &net.cfg.stem)?;
    let visible: Vec<Vec<usize>> = masks.iter().map(MaskPyramid::visible_indices).collect();
    if visible.windows(2).any(|w| w[0].len() != w[1].len()) {
        return Err(Error::dim("masks in a batch must keep the same number of tokens"));
    }
    net.features(fx, images, steps, Some(&levels), Some(&visible))
}

/// Builds a classification model for `cfg` whose encoder comes from a
/// pretraining checkpoint; the head is freshly initialized from `seed`.
pub fn finetune_handoff(ckpt: &Checkpoint, cfg: ModelConfig, seed: u64) -> Result<Spikformer> {
    let src = ckpt.model_config()?;
    let same = src.depth == cfg.depth
        && src.dim == cfg.dim
        && src.heads == cfg.heads
        && src.mlp_ratio == cfg.mlp_ratio
        && src.stem == cfg.stem
        && src.in_channels == cfg.in_channels;
    if !same {
        return Err(Error::Load("checkpoint encoder does not match the target configuration".into()));
    }
    let mut model = Spikformer::new(cfg, seed)?;
    model.load_encoder(ckpt)?;
    Ok(model)
}
