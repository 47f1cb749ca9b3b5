use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Conv2d, Forward, ParamStore};
use crate::neuron::{Lif, LifConfig};
use crate::profiler::{LayerRecord, OpKind};
use crate::tensor::{DenseTensor, Var};

use super::config::{ResidualMode, StemConfig, StemKind};
use super::encoder::join;
use super::LayerInfo;

/// Visibility masks (1 = visible) for a batch at the stem input and after
/// each stem block, each laid out `[B, h * w]` at that stage's resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelMasks {
    pub image: Vec<f32>,
    pub blocks: Vec<Vec<f32>>,
}

/// Repeats a `[B, S]` mask over `steps` time-major copies.
fn over_time(mask: &[f32], steps: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(mask.len() * steps);
    for _ in 0..steps {
        out.extend_from_slice(mask);
    }
    out
}

/// Multiplies `[TB, C, H, W]` by a `[B, H*W]` mask.
fn apply_mask(fx: &mut Forward<'_>, x: Var, mask: &[f32], steps: usize) -> Result<Var> {
    let s = fx.tape.shape(x).to_vec();
    let hw = s[2] * s[3];
    if mask.len() * steps != s[0] * hw {
        return Err(Error::dim(format!("mask of {} entries does not fit activation {s:?} over {steps} steps", mask.len())));
    }
    let full = over_time(mask, steps);
    let m = DenseTensor::from_fn(s.clone(), |i| {
        let b = i / (s[1] * hw);
        full[b * hw + i % hw]
    });
    let mv = fx.input(m);
    fx.tape.mark_spiking(mv);
    fx.tape.mul(x, mv)
}

#[derive(Debug, Clone)]
struct ConvUnit {
    conv: Conv2d,
    bn: BatchNorm,
    lif: Lif,
}

impl ConvUnit {
    #[allow(clippy::too_many_arguments)]
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        lif: LifConfig,
        rng: &mut R,
    ) -> Self {
        Self {
            conv: Conv2d::new(store, &format!("{name}.conv"), cin, cout, kernel, stride, padding, false, rng),
            bn: BatchNorm::new(store, &format!("{name}.bn"), cout),
            lif: Lif::new(&format!("{name}.lif"), lif),
        }
    }

    fn num_params(&self) -> usize {
        self.conv.num_params() + self.bn.num_params()
    }

    fn inventory(&self, out: &mut Vec<LayerInfo>) {
        out.push(LayerInfo::new(&self.conv.name, "conv"));
        out.push(LayerInfo::new(&self.bn.name, "batch_norm"));
        out.push(LayerInfo::new(&self.lif.name, "lif"));
    }

    /// Masks, when given, are the input and output resolution masks.
    fn forward(&self, fx: &mut Forward<'_>, x: Var, steps: usize, masks: Option<(&[f32], &[f32])>) -> Result<Var> {
        let x = match masks {
            Some((m_in, _)) => apply_mask(fx, x, m_in, steps)?,
            None => x,
        };
        let y = self.conv.forward(fx, x)?;
        let bn_mask = masks.map(|(_, m_out)| over_time(m_out, steps));
        let y = self.bn.forward_image(fx, y, bn_mask.as_deref())?;
        let s = self.lif.forward(fx, y, steps)?;
        match masks {
            Some((_, m_out)) => apply_mask(fx, s, m_out, steps),
            None => Ok(s),
        }
    }
}

#[derive(Debug, Clone)]
enum StemBlock {
    Sps { unit: ConvUnit, pool: bool },
    Scs { down: ConvUnit, expand: ConvUnit, project: ConvUnit },
}

#[derive(Debug, Clone)]
pub struct Stem {
    pub cfg: StemConfig,
    blocks: Vec<StemBlock>,
    rpe: Option<ConvUnit>,
    residual: ResidualMode,
}

impl Stem {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        cfg: &StemConfig,
        in_channels: usize,
        dim: usize,
        residual: ResidualMode,
        lif: LifConfig,
        rng: &mut R,
    ) -> Self {
        let chans = cfg.channels(dim);
        let mut cin = in_channels;
        let mut blocks = Vec::new();
        for (i, (&c, &down)) in chans.iter().zip(&cfg.downsample).enumerate() {
            let name = format!("stem.{i}");
            blocks.push(match cfg.kind {
                StemKind::Sps => StemBlock::Sps { unit: ConvUnit::new(store, &name, cin, c, 3, 1, 1, lif, rng), pool: down },
                StemKind::Scs => {
                    let down_unit = if down {
                        ConvUnit::new(store, &format!("{name}.down"), cin, c, 2, 2, 0, lif, rng)
                    } else {
                        ConvUnit::new(store, &format!("{name}.down"), cin, c, 3, 1, 1, lif, rng)
                    };
                    let hidden = c * cfg.mlp_ratio;
                    StemBlock::Scs {
                        down: down_unit,
                        expand: ConvUnit::new(store, &format!("{name}.expand"), c, hidden, 3, 1, 1, lif, rng),
                        project: ConvUnit::new(store, &format!("{name}.project"), hidden, c, 3, 1, 1, lif, rng),
                    }
                }
            });
            cin = c;
        }
        let rpe = cfg.rpe.then(|| ConvUnit::new(store, "rpe", dim, dim, 3, 1, 1, lif, rng));
        Self { cfg: cfg.clone(), blocks, rpe, residual }
    }

    pub fn num_params(&self) -> usize {
        let blocks: usize = self
            .blocks
            .iter()
            .map(|b| match b {
                StemBlock::Sps { unit, .. } => unit.num_params(),
                StemBlock::Scs { down, expand, project } => down.num_params() + expand.num_params() + project.num_params(),
            })
            .sum();
        blocks + self.rpe.as_ref().map_or(0, ConvUnit::num_params)
    }

    pub fn inventory(&self, out: &mut Vec<LayerInfo>) {
        for b in &self.blocks {
            match b {
                StemBlock::Sps { unit, pool } => {
                    unit.inventory(out);
                    if *pool {
                        out.push(LayerInfo::new(&format!("{}.pool", unit.conv.name.trim_end_matches(".conv")), "max_pool"));
                    }
                }
                StemBlock::Scs { down, expand, project } => {
                    down.inventory(out);
                    expand.inventory(out);
                    project.inventory(out);
                }
            }
        }
        if let Some(r) = &self.rpe {
            r.inventory(out);
        }
    }

    /// `x` is `[steps * B, C, H, W]`; returns the `[steps * B, D, h, w]` grid.
    pub fn forward(&self, fx: &mut Forward<'_>, x: Var, steps: usize, masks: Option<&LevelMasks>) -> Result<Var> {
        if masks.is_some() && self.cfg.kind == StemKind::Sps {
            return Err(Error::Unsupported("masked input requires the convolutional stem".into()));
        }
        if let Some(m) = masks {
            if m.blocks.len() != self.blocks.len() {
                return Err(Error::dim(format!("{} mask levels for {} stem blocks", m.blocks.len(), self.blocks.len())));
            }
        }
        let mut x = x;
        for (i, b) in self.blocks.iter().enumerate() {
            let level = masks.map(|m| (if i == 0 { m.image.as_slice() } else { m.blocks[i - 1].as_slice() }, m.blocks[i].as_slice()));
            x = match b {
                StemBlock::Sps { unit, pool } => {
                    let s = unit.forward(fx, x, steps, None)?;
                    if *pool {
                        let name = format!("stem.{i}.pool");
                        fx.record(LayerRecord::new(&name, OpKind::Pool).with_flops(fx.value(s).numel() as u64));
                        fx.tape.max_pool2d(s, 2, 2)?
                    } else {
                        s
                    }
                }
                StemBlock::Scs { down, expand, project } => {
                    let same = level.map(|(_, o)| (o, o));
                    let s0 = down.forward(fx, x, steps, level)?;
                    let s1 = expand.forward(fx, s0, steps, same)?;
                    let s2 = project.forward(fx, s1, steps, same)?;
                    join(fx, s0, s2, self.residual)?
                }
            };
        }
        if let Some(r) = &self.rpe {
            let p = r.forward(fx, x, steps, None)?;
            x = join(fx, x, p, self.residual)?;
        }
        Ok(x)
    }
}
