//! Straightforward f64 re-implementations, written from the layer
//! definitions with plain loops and no shared code with the library.

use std::collections::HashMap;
use std::f64::consts::PI;

use spikekit::architecture::{ModelConfig, ResidualMode, StemKind};
use spikekit::attention::ProductOrder;
use spikekit::neuron::{LifConfig, ResetMode};
use spikekit::nn::ParamStore;

pub type Params = HashMap<String, Vec<f64>>;

pub fn params_of(store: &ParamStore) -> Params {
    store.entries().map(|(_, e)| (e.name.clone(), super::to_f64(e.value.data()))).collect()
}

/// Cross-correlation; `x` is `[b, c, h, w]`, `w` is `[o, c, k, k]`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d(x: &[f64], b: usize, c: usize, h: usize, wd: usize, w: &[f64], o: usize, k: usize, stride: usize, pad: usize) -> (Vec<f64>, usize, usize) {
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; b * o * oh * ow];
    for bi in 0..b {
        for oc in 0..o {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = 0.0;
                    for ic in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (xo * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x[((bi * c + ic) * h + iy as usize) * wd + ix as usize] * w[((oc * c + ic) * k + ky) * k + kx];
                            }
                        }
                    }
                    out[((bi * o + oc) * oh + y) * ow + xo] = acc;
                }
            }
        }
    }
    (out, oh, ow)
}

pub fn max_pool2(x: &[f64], b: usize, c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; b * c * oh * ow];
    for p in 0..b * c {
        for y in 0..oh {
            for xo in 0..ow {
                let at = |dy: usize, dx: usize| x[(p * h + 2 * y + dy) * w + 2 * xo + dx];
                out[(p * oh + y) * ow + xo] = at(0, 0).max(at(0, 1)).max(at(1, 0)).max(at(1, 1));
            }
        }
    }
    out
}

/// Batch norm with batch statistics over `[batch, channels, spatial]`,
/// counting only visible positions; masked outputs are zero.
pub fn batch_norm(x: &[f64], batch: usize, ch: usize, sp: usize, g: &[f64], bt: &[f64], eps: f64, mask: Option<&[f64]>) -> Vec<f64> {
    let vis = |b: usize, s: usize| mask.map_or(1.0, |m| m[b * sp + s]);
    let mut out = vec![0.0; x.len()];
    for c in 0..ch {
        let (mut n, mut sum) = (0.0, 0.0);
        for b in 0..batch {
            for s in 0..sp {
                n += vis(b, s);
                sum += vis(b, s) * x[(b * ch + c) * sp + s];
            }
        }
        let mu = sum / n;
        let mut ss = 0.0;
        for b in 0..batch {
            for s in 0..sp {
                ss += vis(b, s) * (x[(b * ch + c) * sp + s] - mu).powi(2);
            }
        }
        let inv = 1.0 / (ss / n + eps).sqrt();
        for b in 0..batch {
            for s in 0..sp {
                let i = (b * ch + c) * sp + s;
                out[i] = if vis(b, s) > 0.0 { (x[i] - mu) * inv * g[c] + bt[c] } else { 0.0 };
            }
        }
    }
    out
}

pub fn batch_norm_fixed(x: &[f64], batch: usize, ch: usize, sp: usize, g: &[f64], bt: &[f64], mean: &[f64], var: &[f64], eps: f64) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for b in 0..batch {
        for c in 0..ch {
            for s in 0..sp {
                let i = (b * ch + c) * sp + s;
                out[i] = (x[i] - mean[c]) / (var[c] + eps).sqrt() * g[c] + bt[c];
            }
        }
    }
    out
}

pub fn surrogate(alpha: f64, x: f64) -> f64 {
    (PI / 2.0 * alpha * x).atan() / PI + 0.5
}

/// Neuron with the smooth step in place of the Heaviside; `x` is time-major.
pub fn lif_relaxed(x: &[f64], steps: usize, cfg: &LifConfig) -> Vec<f64> {
    let n = x.len() / steps;
    let (tau, thr, vr, a) = (cfg.tau as f64, cfg.v_threshold as f64, cfg.v_reset as f64, cfg.surrogate_alpha as f64);
    let mut v = vec![vr; n];
    let mut out = vec![0.0; x.len()];
    for t in 0..steps {
        for j in 0..n {
            let h = v[j] + (x[t * n + j] - (v[j] - vr)) / tau;
            let s = surrogate(a, h - thr);
            v[j] = match cfg.reset_mode {
                ResetMode::Hard => h * (1.0 - s) + vr * s,
                ResetMode::Soft => h - thr * s,
            };
            out[t * n + j] = s;
        }
    }
    out
}

/// Rows of `x` (length `k`) times `w` `[k, n]`, plus `b`.
pub fn linear(x: &[f64], k: usize, w: &[f64], n: usize, b: Option<&[f64]>) -> Vec<f64> {
    let rows = x.len() / k;
    let mut out = vec![0.0; rows * n];
    for r in 0..rows {
        for j in 0..n {
            let mut acc = b.map_or(0.0, |b| b[j]);
            for i in 0..k {
                acc += x[r * k + i] * w[i * n + j];
            }
            out[r * n + j] = acc;
        }
    }
    out
}

/// `[bt, m, k] x [bt, k, n]`, or `x [bt, n, k]^T`.
pub fn bmm(a: &[f64], b: &[f64], bt: usize, m: usize, k: usize, n: usize, trans_b: bool) -> Vec<f64> {
    let mut out = vec![0.0; bt * m * n];
    for z in 0..bt {
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    let bv = if trans_b { b[(z * n + j) * k + p] } else { b[(z * k + p) * n + j] };
                    acc += a[(z * m + i) * k + p] * bv;
                }
                out[(z * m + i) * n + j] = acc;
            }
        }
    }
    out
}

pub fn softmax_rows(x: &[f64], d: usize) -> Vec<f64> {
    x.chunks(d)
        .flat_map(|r| {
            let m = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = r.iter().map(|v| (v - m).exp()).sum();
            r.iter().map(move |v| (v - m).exp() / z)
        })
        .collect()
}

pub fn layer_norm(x: &[f64], d: usize, g: &[f64], b: &[f64], eps: f64) -> Vec<f64> {
    x.chunks(d)
        .flat_map(|r| {
            let mu = r.iter().sum::<f64>() / d as f64;
            let var = r.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            r.iter().enumerate().map(move |(j, v)| (v - mu) * inv * g[j] + b[j])
        })
        .collect()
}

pub fn gelu_tanh(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// Reorders `[a0, a1, ...]`-shaped data by `axes`.
pub fn permute(x: &[f64], shape: &[usize], axes: &[usize]) -> Vec<f64> {
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = (0..shape.len()).map(|i| shape[i + 1..].iter().product()).collect();
    let mut out = Vec::with_capacity(x.len());
    let mut idx = vec![0usize; shape.len()];
    for _ in 0..x.len() {
        let src: usize = idx.iter().enumerate().map(|(o, &i)| i * strides[axes[o]]).sum();
        out.push(x[src]);
        for o in (0..idx.len()).rev() {
            idx[o] += 1;
            if idx[o] < out_shape[o] {
                break;
            }
            idx[o] = 0;
        }
    }
    out
}

fn join(a: &[f64], b: &[f64], mode: ResidualMode) -> Vec<f64> {
    a.iter()
        .zip(b)
        .map(|(&r, &s)| match mode {
            ResidualMode::Add => r + s,
            ResidualMode::Iand => r * (1.0 - s),
        })
        .collect()
}

struct Img {
    data: Vec<f64>,
    c: usize,
    h: usize,
    w: usize,
}

fn norm(p: &Params, bn: &str, x: &[f64], batch: usize, ch: usize, sp: usize) -> Vec<f64> {
    batch_norm(x, batch, ch, sp, &p[&format!("{bn}.weight")], &p[&format!("{bn}.bias")], 1e-5, None)
}

/// Conv (no bias), batch-stat BN, relaxed neuron.
#[allow(clippy::too_many_arguments)]
fn conv_unit(p: &Params, name: &str, x: &Img, tb: usize, cout: usize, k: usize, stride: usize, pad: usize, cfg: &ModelConfig) -> Img {
    let (y, oh, ow) = conv2d(&x.data, tb, x.c, x.h, x.w, &p[&format!("{name}.conv.weight")], cout, k, stride, pad);
    let y = norm(p, &format!("{name}.bn"), &y, tb, cout, oh * ow);
    Img { data: lif_relaxed(&y, cfg.time_steps, &cfg.lif), c: cout, h: oh, w: ow }
}

/// Linear, batch-stat token BN, relaxed neuron.
#[allow(clippy::too_many_arguments)]
fn token_unit(p: &Params, lin: &str, bn: &str, x: &[f64], din: usize, dout: usize, cfg: &ModelConfig) -> Vec<f64> {
    let y = linear(x, din, &p[&format!("{lin}.weight")], dout, Some(&p[&format!("{lin}.bias")]));
    let rows = y.len() / dout;
    let y = norm(p, bn, &y, rows, dout, 1);
    lif_relaxed(&y, cfg.time_steps, &cfg.lif)
}

fn attention(p: &Params, name: &str, x: &[f64], tb: usize, n: usize, cfg: &ModelConfig) -> Vec<f64> {
    let (dim, h) = (cfg.dim, cfg.heads);
    let d = dim / h;
    let q = token_unit(p, &format!("{name}.q"), &format!("{name}.q_bn"), x, dim, dim, cfg);
    let k = token_unit(p, &format!("{name}.k"), &format!("{name}.k_bn"), x, dim, dim, cfg);
    let v = token_unit(p, &format!("{name}.v"), &format!("{name}.v_bn"), x, dim, dim, cfg);
    let split = |t: &[f64]| permute(t, &[tb, n, h, d], &[0, 2, 1, 3]);
    let (q, k, v) = (split(&q), split(&k), split(&v));
    let raw = match cfg.order {
        ProductOrder::QkFirst => {
            let a = bmm(&q, &k, tb * h, n, d, n, true);
            bmm(&a, &v, tb * h, n, n, d, false)
        }
        ProductOrder::KvFirst => {
            let kt = permute(&k, &[tb * h, n, d], &[0, 2, 1]);
            let m = bmm(&kt, &v, tb * h, d, n, d, false);
            bmm(&q, &m, tb * h, n, d, d, false)
        }
    };
    let s = p.get(&format!("{name}.scale")).map_or(cfg.scale as f64, |s| s[0]);
    let scaled: Vec<f64> = raw.iter().map(|v| v * s).collect();
    let merged = permute(&scaled, &[tb, h, n, d], &[0, 2, 1, 3]);
    let a = lif_relaxed(&merged, cfg.time_steps, &cfg.lif);
    token_unit(p, &format!("{name}.proj"), &format!("{name}.proj_bn"), &a, dim, dim, cfg)
}

/// Training-mode logits `[B, classes]` of an SSA model evaluated with the
/// smooth neuron.
pub fn network_logits(cfg: &ModelConfig, p: &Params, images: &[f64], batch: usize) -> Vec<f64> {
    let steps = cfg.time_steps;
    let tb = steps * batch;
    let [h, w] = cfg.image_size;
    let mut data = Vec::with_capacity(images.len() * steps);
    for _ in 0..steps {
        data.extend_from_slice(images);
    }
    let mut x = Img { data, c: cfg.in_channels, h, w };
    let chans = cfg.stem.channels(cfg.dim);
    for (i, (&c, &down)) in chans.iter().zip(&cfg.stem.downsample).enumerate() {
        x = match cfg.stem.kind {
            StemKind::Sps => {
                let u = conv_unit(p, &format!("stem.{i}"), &x, tb, c, 3, 1, 1, cfg);
                if down {
                    Img { data: max_pool2(&u.data, tb, c, u.h, u.w), c, h: u.h / 2, w: u.w / 2 }
                } else {
                    u
                }
            }
            StemKind::Scs => {
                let (k, s, pad) = if down { (2, 2, 0) } else { (3, 1, 1) };
                let s0 = conv_unit(p, &format!("stem.{i}.down"), &x, tb, c, k, s, pad, cfg);
                let s1 = conv_unit(p, &format!("stem.{i}.expand"), &s0, tb, c * cfg.stem.mlp_ratio, 3, 1, 1, cfg);
                let s2 = conv_unit(p, &format!("stem.{i}.project"), &s1, tb, c, 3, 1, 1, cfg);
                Img { data: join(&s0.data, &s2.data, cfg.residual), ..s0 }
            }
        };
    }
    if cfg.stem.rpe {
        let r = conv_unit(p, "rpe", &x, tb, cfg.dim, 3, 1, 1, cfg);
        x.data = join(&x.data, &r.data, cfg.residual);
    }
    let (d, n) = (cfg.dim, x.h * x.w);
    let mut tokens = permute(&x.data, &[tb, d, n], &[0, 2, 1]);
    for i in 0..cfg.depth {
        let name = format!("blocks.{i}");
        let a = attention(p, &format!("{name}.attn"), &tokens, tb, n, cfg);
        let x1 = join(&tokens, &a, cfg.residual);
        let hid = d * cfg.mlp_ratio;
        let m = token_unit(p, &format!("{name}.mlp.fc1"), &format!("{name}.mlp.bn1"), &x1, d, hid, cfg);
        let m = token_unit(p, &format!("{name}.mlp.fc2"), &format!("{name}.mlp.bn2"), &m, hid, d, cfg);
        tokens = join(&x1, &m, cfg.residual);
    }
    let mut gap = vec![0.0; batch * d];
    for t in 0..steps {
        for b in 0..batch {
            for j in 0..n {
                for c in 0..d {
                    gap[b * d + c] += tokens[((t * batch + b) * n + j) * d + c] / (steps * n) as f64;
                }
            }
        }
    }
    linear(&gap, d, &p["head.weight"], cfg.num_classes, Some(&p["head.bias"]))
}
