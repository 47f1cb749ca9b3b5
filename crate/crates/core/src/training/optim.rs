use crate::nn::{ParamId, ParamStore};

/// Adam with decoupled weight decay. Decay applies only to optimized
/// tensors of rank two or more (weights, not biases or norm affines).
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    pub step: u64,
    m: Vec<Option<Vec<f32>>>,
    v: Vec<Option<Vec<f32>>>,
}

impl Default for AdamW {
    fn default() -> Self {
        Self::new(0.05)
    }
}

impl AdamW {
    pub fn new(weight_decay: f32) -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, step: 0, m: Vec::new(), v: Vec::new() }
    }

    /// First-moment buffer for a parameter, once it has been updated.
    pub fn first_moment(&self, id: ParamId) -> Option<&[f32]> {
        self.m.get(id.index()).and_then(|m| m.as_deref())
    }

    pub fn second_moment(&self, id: ParamId) -> Option<&[f32]> {
        self.v.get(id.index()).and_then(|v| v.as_deref())
    }

    /// One update of every optimized parameter that has a gradient.
    pub fn step(&mut self, store: &mut ParamStore, lr: f32) {
        self.step_scaled(store, lr, |_| 1.0);
    }

    /// As [`AdamW::step`] with a per-parameter learning-rate multiplier.
    pub fn step_scaled(&mut self, store: &mut ParamStore, lr: f32, scale: impl Fn(&str) -> f32) {
        self.step += 1;
        let n = store.len();
        self.m.resize(n, None);
        self.v.resize(n, None);
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            if !store.is_optimized(id) {
                continue;
            }
            let Some(g) = store.grad(id).map(<[f32]>::to_vec) else { continue };
            let lr_p = lr * scale(&store.entry(id).name);
            let m = self.m[id.index()].get_or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v[id.index()].get_or_insert_with(|| vec![0.0; g.len()]);
            let p = store.value_mut(id);
            let decay = if p.rank() >= 2 { lr_p * self.weight_decay } else { 0.0 };
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                if decay != 0.0 {
                    *w -= decay * *w;
                }
                *w -= lr_p * (*mi / bc1) / ((*vi / bc2).sqrt() + self.eps);
            }
        }
    }
}

/// Global L2 norm of all optimized gradients.
pub fn grad_norm(store: &ParamStore) -> f32 {
    store
        .ids()
        .filter(|&id| store.is_optimized(id))
        .filter_map(|id| store.grad(id))
        .flat_map(|g| g.iter().map(|&x| (x as f64).powi(2)))
        .sum::<f64>()
        .sqrt() as f32
}

/// Rescales gradients so their global norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f32) -> f32 {
    let norm = grad_norm(store);
    if norm > max_norm && norm.is_finite() {
        let c = max_norm / norm;
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            if let Some(g) = store.grad_mut(id) {
                g.iter_mut().for_each(|x| *x *= c);
            }
        }
    }
    norm
}

/// Learning-rate multiplier for layer-wise decay: the head gets 1, encoder
/// block `i` of `depth` gets `factor^(depth - i)`, and the stem gets
/// `factor^(depth + 1)`.
pub fn layer_decay_scale(name: &str, depth: usize, factor: f32) -> f32 {
    let level = if let Some(rest) = name.strip_prefix("blocks.") {
        rest.split('.').next().and_then(|i| i.parse::<usize>().ok()).map_or(0, |i| depth - i.min(depth))
    } else if name.starts_with("stem.") || name.starts_with("rpe.") {
        depth + 1
    } else {
        0
    };
    factor.powi(level as i32)
}
