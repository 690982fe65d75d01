use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::params::{ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Adam with decoupled weight decay. Moments live only for parameters that
/// have received a gradient.
pub struct AdamW {
    cfg: AdamWConfig,
    t: u64,
    state: HashMap<ParamId, Moments>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        AdamW { cfg, t: 0, state: HashMap::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Applies one update. Parameters absent from `grads` are untouched, and
    /// `lr == 0` leaves every parameter unchanged.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Vec<f64>)], lr: f64) {
        self.t += 1;
        let AdamWConfig { beta1, beta2, eps, weight_decay } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (id, g) in grads {
            let st = self.state.entry(*id).or_insert_with(|| Moments { m: vec![0.0; g.len()], v: vec![0.0; g.len()] });
            for ((m, v), &gi) in st.m.iter_mut().zip(st.v.iter_mut()).zip(g) {
                *m = beta1 * *m + (1.0 - beta1) * gi;
                *v = beta2 * *v + (1.0 - beta2) * gi * gi;
            }
            if lr == 0.0 {
                continue;
            }
            let p = store.get_mut(*id).data_mut();
            for ((w, m), v) in p.iter_mut().zip(&st.m).zip(&st.v) {
                let update = (m / bc1) / ((v / bc2).sqrt() + eps) + weight_decay * *w;
                *w -= lr * update;
            }
        }
    }
}

pub fn global_norm(grads: &[(ParamId, Vec<f64>)]) -> f64 {
    grads.iter().flat_map(|(_, g)| g.iter()).map(|x| x * x).sum::<f64>().sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [(ParamId, Vec<f64>)], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flat_map(|(_, g)| g.iter_mut()).for_each(|x| *x *= s);
    }
    norm
}
