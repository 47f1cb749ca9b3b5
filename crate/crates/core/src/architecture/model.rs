use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{Forward, Linear, ParamStore, SpikeMode};
use crate::profiler::{ActivationTrace, OpLedger, TraceKind};
use crate::tensor::{DenseTensor, Var};

use super::config::ModelConfig;
use super::encoder::EncoderBlock;
use super::stem::{LevelMasks, Stem};
use super::LayerInfo;

/// Layer graph of a model; parameters live in a separate [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Network {
    pub cfg: ModelConfig,
    pub stem: Stem,
    pub blocks: Vec<EncoderBlock>,
    pub head: Linear,
}

/// Stacks `steps` copies of `[B, ...]` into a time-major `[steps * B, ...]`.
pub fn replicate_over_time(images: &DenseTensor, steps: usize) -> Result<DenseTensor> {
    if steps == 0 {
        return Err(Error::config("time steps must be positive"));
    }
    let mut shape = images.shape().to_vec();
    shape[0] *= steps;
    let mut data = Vec::with_capacity(images.numel() * steps);
    for _ in 0..steps {
        data.extend_from_slice(images.data());
    }
    DenseTensor::new(shape, data)
}

impl Network {
    pub fn build(cfg: &ModelConfig, store: &mut ParamStore, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stem = Stem::new(store, &cfg.stem, cfg.in_channels, cfg.dim, cfg.residual, cfg.lif, &mut rng);
        let blocks = (0..cfg.depth)
            .map(|i| EncoderBlock::new(store, &format!("blocks.{i}"), cfg, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let head = Linear::new(store, "head", cfg.dim, cfg.num_classes, true, &mut rng);
        Ok(Self { cfg: cfg.clone(), stem, blocks, head })
    }

    fn check_images(&self, images: &DenseTensor) -> Result<usize> {
        let c = &self.cfg;
        match images.shape() {
            [b, ch, h, w] if *ch == c.in_channels && [*h, *w] == c.image_size => Ok(*b),
            s => Err(Error::dim(format!(
                "expected images [B, {}, {}, {}], got {s:?}",
                c.in_channels, c.image_size[0], c.image_size[1]
            ))),
        }
    }

    /// Encoder output tokens `[steps * B, N, D]`. With `visible`, only the
    /// listed token rows (per batch item) enter the encoder blocks.
    pub fn features(
        &self,
        fx: &mut Forward<'_>,
        images: &DenseTensor,
        steps: usize,
        masks: Option<&LevelMasks>,
        visible: Option<&[Vec<usize>]>,
    ) -> Result<Var> {
        let b = self.check_images(images)?;
        if let Some(l) = &mut fx.ledger {
            l.time_steps = steps;
            l.batch = b;
        }
        let x = fx.input(replicate_over_time(images, steps)?);
        let grid = self.stem.forward(fx, x, steps, masks)?;
        let s = fx.tape.shape(grid).to_vec();
        let (tb, d, n) = (s[0], s[1], s[2] * s[3]);
        let flat = fx.tape.reshape(grid, &[tb, d, n])?;
        let mut tokens = fx.tape.permute(flat, &[0, 2, 1])?;
        fx.trace("stem.tokens", TraceKind::Spike, tokens);
        if let Some(vis) = visible {
            if vis.len() != b {
                return Err(Error::dim(format!("{} visible-index lists for batch {b}", vis.len())));
            }
            let idx: Vec<Vec<usize>> = (0..tb).map(|i| vis[i % b].clone()).collect();
            tokens = fx.tape.gather_rows(tokens, &idx)?;
        }
        for blk in &self.blocks {
            tokens = blk.forward(fx, tokens, steps)?;
        }
        Ok(tokens)
    }

    /// Mean over tokens and time steps, then the linear head: `[B, classes]`.
    pub fn classify(&self, fx: &mut Forward<'_>, tokens: Var, steps: usize) -> Result<Var> {
        let s = fx.tape.shape(tokens).to_vec();
        if s.len() != 3 || s[0] % steps != 0 {
            return Err(Error::dim(format!("tokens {s:?} do not split into {steps} steps")));
        }
        let pooled = fx.tape.mean_axis(tokens, 1)?;
        let pooled = fx.tape.reshape(pooled, &[steps, s[0] / steps, s[2]])?;
        let gap = fx.tape.mean_axis(pooled, 0)?;
        self.head.forward(fx, gap)
    }

    pub fn logits(&self, fx: &mut Forward<'_>, images: &DenseTensor, steps: usize) -> Result<Var> {
        let t = self.features(fx, images, steps, None, None)?;
        self.classify(fx, t, steps)
    }

    pub fn num_params(&self) -> usize {
        self.stem.num_params() + self.blocks.iter().map(EncoderBlock::num_params).sum::<usize>() + self.head.num_params()
    }

    pub fn inventory(&self) -> Vec<LayerInfo> {
        let mut out = Vec::new();
        self.stem.inventory(&mut out);
        for b in &self.blocks {
            b.inventory(&mut out);
        }
        out.push(LayerInfo::new("head", "linear"));
        out
    }
}

/// A Spikformer with its parameters.
#[derive(Debug, Clone)]
pub struct Spikformer {
    pub net: Network,
    pub store: ParamStore,
}

impl Spikformer {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let net = Network::build(&cfg, &mut store, seed)?;
        Ok(Self { net, store })
    }

    pub fn cfg(&self) -> &ModelConfig {
        &self.net.cfg
    }

    /// Eval-mode logits `[B, classes]`.
    pub fn predict(&mut self, images: &DenseTensor, steps: usize) -> Result<DenseTensor> {
        let mut fx = Forward::new(&mut self.store, false);
        let y = self.net.logits(&mut fx, images, steps)?;
        Ok(fx.value(y).clone())
    }

    /// Sets batch-norm running statistics to their average over `passes`
    /// training-mode forwards of `images`; weights are untouched.
    pub fn calibrate(&mut self, images: &DenseTensor, steps: usize, passes: usize) -> Result<()> {
        for k in 0..passes {
            let mut fx = Forward::new(&mut self.store, true).with_grads(false);
            fx.bn_momentum = Some(1.0 / (k + 1) as f32);
            self.net.logits(&mut fx, images, steps)?;
        }
        Ok(())
    }

    /// Eval-mode forward with op counting.
    pub fn profile(&mut self, images: &DenseTensor, steps: usize) -> Result<OpLedger> {
        let mut fx = Forward::new(&mut self.store, false).with_ledger();
        self.net.logits(&mut fx, images, steps)?;
        Ok(fx.ledger.take().expect("ledger enabled"))
    }

    /// Eval-mode forward capturing every neuron input and spike output.
    pub fn trace(&mut self, images: &DenseTensor, steps: usize, mode: SpikeMode) -> Result<(DenseTensor, ActivationTrace)> {
        let mut fx = Forward::new(&mut self.store, false).with_trace().with_mode(mode);
        let y = self.net.logits(&mut fx, images, steps)?;
        let logits = fx.value(y).clone();
        Ok((logits, fx.trace.take().expect("trace enabled")))
    }

    pub fn num_params(&self) -> usize {
        self.store.num_trainable()
    }

    pub fn inventory(&self) -> Vec<LayerInfo> {
        self.net.inventory()
    }
}
