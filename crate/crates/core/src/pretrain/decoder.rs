use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{trunc_normal, Forward, LayerNorm, Linear, ParamId, ParamStore, INIT_STD};
use crate::profiler::{LayerRecord, OpKind};
use crate::tensor::{DenseTensor, Var};
use crate::architecture::LayerInfo;
use crate::attention::SOFTMAX_FLOPS_PER_ELEMENT;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self { depth: 4, dim: 256, heads: 4, mlp_ratio: 4 }
    }
}

/// Fixed 2-D sine-cosine position table `[h * w, dim]`: the first half of
/// the channels encodes the row, the second half the column.
pub fn sincos_positions(grid: [usize; 2], dim: usize) -> Result<DenseTensor> {
    if dim % 4 != 0 {
        return Err(Error::config(format!("position dim {dim} must be a multiple of 4")));
    }
    let quarter = dim / 4;
    let freq: Vec<f64> = (0..quarter).map(|i| 1.0 / 10000f64.powf(i as f64 / quarter as f64)).collect();
    let mut out = Vec::with_capacity(grid[0] * grid[1] * dim);
    for r in 0..grid[0] {
        for c in 0..grid[1] {
            for pos in [r as f64, c as f64] {
                out.extend(freq.iter().map(|f| (pos * f).sin() as f32));
                out.extend(freq.iter().map(|f| (pos * f).cos() as f32));
            }
        }
    }
    DenseTensor::new([grid[0] * grid[1], dim], out)
}

#[derive(Debug, Clone)]
struct DecoderBlock {
    name: String,
    norm1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    proj: Linear,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    heads: usize,
}

impl DecoderBlock {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cfg: &DecoderConfig, rng: &mut R) -> Self {
        let d = cfg.dim;
        let h = d * cfg.mlp_ratio;
        Self {
            name: name.to_string(),
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d),
            q: Linear::new(store, &format!("{name}.attn.q"), d, d, true, rng),
            k: Linear::new(store, &format!("{name}.attn.k"), d, d, true, rng),
            v: Linear::new(store, &format!("{name}.attn.v"), d, d, true, rng),
            proj: Linear::new(store, &format!("{name}.attn.proj"), d, d, true, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d),
            fc1: Linear::new(store, &format!("{name}.mlp.fc1"), d, h, true, rng),
            fc2: Linear::new(store, &format!("{name}.mlp.fc2"), h, d, true, rng),
            heads: cfg.heads,
        }
    }

    fn linears(&self) -> [&Linear; 6] {
        [&self.q, &self.k, &self.v, &self.proj, &self.fc1, &self.fc2]
    }

    fn num_params(&self) -> usize {
        self.norm1.num_params() + self.norm2.num_params() + self.linears().iter().map(|l| l.num_params()).sum::<usize>()
    }

    fn split_heads(&self, fx: &mut Forward<'_>, x: Var, b: usize, n: usize, d: usize) -> Result<Var> {
        let hd = d / self.heads;
        let x = fx.tape.reshape(x, &[b, n, self.heads, hd])?;
        let x = fx.tape.permute(x, &[0, 2, 1, 3])?;
        fx.tape.reshape(x, &[b * self.heads, n, hd])
    }

    fn attention(&self, fx: &mut Forward<'_>, x: Var) -> Result<Var> {
        let s = fx.tape.shape(x).to_vec();
        let (b, n, d) = (s[0], s[1], s[2]);
        let hd = d / self.heads;
        let q = self.q.forward(fx, x)?;
        let k = self.k.forward(fx, x)?;
        let v = self.v.forward(fx, x)?;
        let (q, k, v) = (self.split_heads(fx, q, b, n, d)?, self.split_heads(fx, k, b, n, d)?, self.split_heads(fx, v, b, n, d)?);
        let scores = fx.tape.batched_matmul(q, k, true)?;
        let scores = fx.tape.scale(scores, 1.0 / (hd as f32).sqrt());
        let attn = fx.tape.softmax(scores);
        let out = fx.tape.batched_matmul(attn, v, false)?;
        if fx.counting() {
            let per_head = 4 * n * n * hd + SOFTMAX_FLOPS_PER_ELEMENT as usize * n * n;
            fx.record(LayerRecord::new(&format!("{}.attn", self.name), OpKind::Attention).with_flops((b * self.heads * per_head) as u64));
        }
        let out = fx.tape.reshape(out, &[b, self.heads, n, hd])?;
        let out = fx.tape.permute(out, &[0, 2, 1, 3])?;
        let out = fx.tape.reshape(out, &[b, n, d])?;
        self.proj.forward(fx, out)
    }

    fn forward(&self, fx: &mut Forward<'_>, x: Var) -> Result<Var> {
        let h = self.norm1.forward(fx, x)?;
        let h = self.attention(fx, h)?;
        let x = fx.tape.add(x, h)?;
        let h = self.norm2.forward(fx, x)?;
        let h = self.fc1.forward(fx, h)?;
        let h = fx.tape.gelu(h);
        let h = self.fc2.forward(fx, h)?;
        fx.tape.add(x, h)
    }
}

/// Lightweight float transformer that predicts pixels for every token from
/// the encoder's visible-token output.
#[derive(Debug, Clone)]
pub struct Decoder {
    pub cfg: DecoderConfig,
    pub grid: [usize; 2],
    pub patch_pixels: usize,
    embed: Linear,
    mask_token: ParamId,
    positions: DenseTensor,
    blocks: Vec<DecoderBlock>,
    norm: LayerNorm,
    pred: Linear,
}

impl Decoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        cfg: DecoderConfig,
        encoder_dim: usize,
        grid: [usize; 2],
        patch_pixels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if cfg.heads == 0 || cfg.dim % cfg.heads != 0 {
            return Err(Error::config(format!("decoder dim {} not divisible by {} heads", cfg.dim, cfg.heads)));
        }
        let embed = Linear::new(store, "decoder.embed", encoder_dim, cfg.dim, true, rng);
        let mask_token = store.add_param("decoder.mask_token", trunc_normal(rng, &[cfg.dim], INIT_STD));
        let positions = sincos_positions(grid, cfg.dim)?;
        let blocks = (0..cfg.depth).map(|i| DecoderBlock::new(store, &format!("decoder.blocks.{i}"), &cfg, rng)).collect();
        let norm = LayerNorm::new(store, "decoder.norm", cfg.dim);
        let pred = Linear::new(store, "decoder.pred", cfg.dim, patch_pixels, true, rng);
        Ok(Self { cfg, grid, patch_pixels, embed, mask_token, positions, blocks, norm, pred })
    }

    pub fn num_params(&self) -> usize {
        self.embed.num_params()
            + self.cfg.dim
            + self.blocks.iter().map(DecoderBlock::num_params).sum::<usize>()
            + self.norm.num_params()
            + self.pred.num_params()
    }

    pub fn inventory(&self, out: &mut Vec<LayerInfo>) {
        out.push(LayerInfo::new("decoder.embed", "linear"));
        for b in &self.blocks {
            out.push(LayerInfo::new(&b.name, "decoder_block"));
        }
        out.push(LayerInfo::new("decoder.norm", "layer_norm"));
        out.push(LayerInfo::new("decoder.pred", "linear"));
    }

    /// `latent` is the encoder output `[steps * B, Nv, D]` for the tokens in
    /// `visible`; returns per-token pixel predictions `[B, N, patch_pixels]`.
    pub fn forward(&self, fx: &mut Forward<'_>, latent: Var, visible: &[Vec<usize>], steps: usize) -> Result<Var> {
        let s = fx.tape.shape(latent).to_vec();
        let b = visible.len();
        if s.len() != 3 || b == 0 || s[0] != steps * b {
            return Err(Error::dim(format!("decoder latent {s:?} does not match {steps} steps x batch {b}")));
        }
        let (nv, de) = (s[1], s[2]);
        let n = self.grid[0] * self.grid[1];
        let x = fx.tape.reshape(latent, &[steps, b * nv * de])?;
        let x = fx.tape.mean_axis(x, 0)?;
        let x = fx.tape.reshape(x, &[b, nv, de])?;
        let x = self.embed.forward(fx, x)?;
        let zeros = fx.input(DenseTensor::zeros([b, n, self.cfg.dim]));
        let tok = fx.param(self.mask_token);
        let full = fx.tape.add_broadcast(zeros, tok)?;
        let full = fx.tape.scatter_rows(full, x, visible)?;
        let pos = fx.input(self.positions.clone());
        let mut x = fx.tape.add_broadcast(full, pos)?;
        for blk in &self.blocks {
            x = blk.forward(fx, x)?;
        }
        let x = self.norm.forward(fx, x)?;
        self.pred.forward(fx, x)
    }
}
