//! Adam with bias correction and a per-iteration exponential learning-rate
//! decay `lr_t = lr_0 * gamma^t`.

use std::collections::BTreeMap;

use latsde_core::diffengine::{Array, ParamStore};
use serde::{Deserialize, Serialize};

/// Decay factor that shrinks the learning rate by 10% every 1000 iterations.
pub fn default_decay() -> f64 {
    (0.9f64.ln() / 1000.0).exp()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr_init: f64,
    pub gamma: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: BTreeMap<String, Array>,
    pub v: BTreeMap<String, Array>,
    /// Number of updates applied (drives bias correction).
    pub step: u64,
    /// Number of schedule ticks (drives the learning rate).
    pub iter: u64,
    pub skipped: u64,
}

impl AdamState {
    pub fn new(lr_init: f64, gamma: f64) -> Self {
        AdamState { lr_init, gamma, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: BTreeMap::new(), v: BTreeMap::new(), step: 0, iter: 0, skipped: 0 }
    }

    /// Learning rate used by the next call to [`AdamState::update`].
    pub fn lr(&self) -> f64 {
        self.lr_init * self.gamma.powf(self.iter as f64)
    }

    /// Advances the schedule without touching parameters or moments.
    pub fn skip(&mut self) {
        self.iter += 1;
        self.skipped += 1;
    }

    /// Applies one update to every parameter in `store` from its accumulated
    /// gradient, then advances the schedule. A non-finite gradient anywhere
    /// leaves all parameters and moments untouched; the schedule still advances.
    /// Returns whether the update was applied.
    pub fn update(&mut self, store: &mut ParamStore) -> bool {
        if !store.grads_finite() {
            log::warn!("non-finite gradient at iteration {}; update skipped", self.iter);
            self.skip();
            return false;
        }
        let lr = self.lr();
        self.iter += 1;
        self.step += 1;
        let t = self.step as i32;
        let (c1, c2) = (1.0 - self.beta1.powi(t), 1.0 - self.beta2.powi(t));
        for (name, e) in store.iter_mut() {
            let n = e.value.len();
            let m = self.m.entry(name.to_string()).or_insert_with(|| Array::zeros(e.value.rows(), e.value.cols()));
            let v = self.v.entry(name.to_string()).or_insert_with(|| Array::zeros(e.value.rows(), e.value.cols()));
            let (ms, vs) = (m.as_mut_slice(), v.as_mut_slice());
            let g = e.grad.as_slice();
            let x = e.value.as_mut_slice();
            for i in 0..n {
                ms[i] = self.beta1 * ms[i] + (1.0 - self.beta1) * g[i];
                vs[i] = self.beta2 * vs[i] + (1.0 - self.beta2) * g[i] * g[i];
                x[i] -= lr * (ms[i] / c1) / ((vs[i] / c2).sqrt() + self.eps);
            }
        }
        true
    }
}
