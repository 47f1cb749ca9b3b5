use super::config::{ModelConfig, StemKind};

fn conv(cin: usize, cout: usize, k: usize) -> usize {
    cin * cout * k * k
}

fn bn(c: usize) -> usize {
    2 * c
}

fn linear(i: usize, o: usize) -> usize {
    i * o + o
}

/// Trainable scalar count from the configuration alone.
pub fn param_count(cfg: &ModelConfig) -> usize {
    let d = cfg.dim;
    let mut total = 0;
    let mut cin = cfg.in_channels;
    for (&c, &down) in cfg.stem.channels(d).iter().zip(&cfg.stem.downsample) {
        total += match cfg.stem.kind {
            StemKind::Sps => conv(cin, c, 3) + bn(c),
            StemKind::Scs => {
                let h = c * cfg.stem.mlp_ratio;
                conv(cin, c, if down { 2 } else { 3 }) + bn(c) + conv(c, h, 3) + bn(h) + conv(h, c, 3) + bn(c)
            }
        };
        cin = c;
    }
    if cfg.stem.rpe {
        total += conv(d, d, 3) + bn(d);
    }
    let hidden = d * cfg.mlp_ratio;
    let attn = 4 * (linear(d, d) + bn(d)) + usize::from(cfg.learnable_scale);
    let mlp = linear(d, hidden) + bn(hidden) + linear(hidden, d) + bn(d);
    total + cfg.depth * (attn + mlp) + linear(d, cfg.num_classes)
}
