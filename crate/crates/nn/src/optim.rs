//! Adaptive-moment optimizer with decoupled weight decay.

use std::collections::HashMap;

use crate::{ParamId, ParamStore};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-6 }
    }
}

struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

pub struct AdamW {
    cfg: AdamWConfig,
    step: u64,
    state: HashMap<ParamId, Moments>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self { cfg, step: 0, state: HashMap::new() }
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.cfg
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update from per-parameter gradients. Parameters without a gradient
    /// are left untouched; buffers are never updated.
    pub fn step<'a>(&mut self, store: &mut ParamStore, grads: impl IntoIterator<Item = (ParamId, &'a [f64])>) {
        self.step += 1;
        let t = self.step as i32;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let mut grads: Vec<(ParamId, &[f64])> = grads.into_iter().collect();
        grads.sort_by_key(|(id, _)| *id);
        for (id, g) in grads {
            if !store.is_trainable(id) {
                continue;
            }
            let p = store.get_mut(id).data_mut();
            assert_eq!(p.len(), g.len(), "gradient length mismatch for parameter {}", id.index());
            let st = self.state.entry(id).or_insert_with(|| Moments { m: vec![0.0; g.len()], v: vec![0.0; g.len()] });
            for i in 0..p.len() {
                p[i] -= c.lr * c.weight_decay * p[i];
                st.m[i] = c.beta1 * st.m[i] + (1.0 - c.beta1) * g[i];
                st.v[i] = c.beta2 * st.v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let mhat = st.m[i] / bc1;
                let vhat = st.v[i] / bc2;
                p[i] -= c.lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
    }
}
