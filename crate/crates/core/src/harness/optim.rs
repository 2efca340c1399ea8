//! Decoupled-weight-decay adaptive-moment optimizer.

use super::OptimizerConfig;
use crate::decoder::ParamStore;
use serde::{Deserialize, Serialize};

/// AdamW over a [`ParamStore`]. Moments are kept parallel to the
/// store's entries; updates iterate in a fixed order so training is
/// bit-reproducible.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamW {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    pub step_count: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(cfg: &OptimizerConfig, store: &ParamStore) -> Self {
        Self {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            step_count: 0,
            m: store.entries().iter().map(|e| vec![0.0; e.data.len()]).collect(),
            v: store.entries().iter().map(|e| vec![0.0; e.data.len()]).collect(),
        }
    }

    /// One update over mean gradients (parallel to the store entries;
    /// empty slots are treated as zero gradient).
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Vec<f64>]) {
        assert_eq!(grads.len(), store.len(), "gradient/parameter layout mismatch");
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for i in 0..store.len() {
            if grads[i].is_empty() {
                continue;
            }
            let entry = store.entry_mut(i);
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for ((p, &g), (mj, vj)) in
                entry.data.iter_mut().zip(&grads[i]).zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mj = self.beta1 * *mj + (1.0 - self.beta1) * g;
                *vj = self.beta2 * *vj + (1.0 - self.beta2) * g * g;
                let mhat = *mj / bc1;
                let vhat = *vj / bc2;
                *p -= self.lr * mhat / (vhat.sqrt() + self.eps) + self.lr * self.weight_decay * *p;
            }
        }
    }

    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.m, &self.v)
    }
}
