use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::numeric::{Scalar, Tensor};

/// Gradients keyed by parameter name. Absent names receive no update.
pub type Grads<T> = BTreeMap<String, Vec<T>>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay, applied to matrices only (not to biases, norms, or vectors).
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

#[derive(Clone, Debug)]
pub struct AdamW<T: Scalar = f32> {
    pub config: AdamWConfig,
    pub steps: u64,
    m: BTreeMap<String, Vec<T>>,
    v: BTreeMap<String, Vec<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW { config, steps: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    /// Rebuilds an optimizer from saved moments.
    pub fn from_state(
        config: AdamWConfig,
        steps: u64,
        m: BTreeMap<String, Vec<T>>,
        v: BTreeMap<String, Vec<T>>,
    ) -> Self {
        AdamW { config, steps, m, v }
    }

    /// First and second moment estimates, keyed by parameter name.
    pub fn moments(&self) -> (&BTreeMap<String, Vec<T>>, &BTreeMap<String, Vec<T>>) {
        (&self.m, &self.v)
    }

    /// One update of every parameter that has a gradient.
    pub fn step(&mut self, params: &mut BTreeMap<String, Tensor<T>>, grads: &Grads<T>, lr: f64) {
        self.steps += 1;
        let c = self.config;
        let t = self.steps as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::from_f64c(c.beta1), T::from_f64c(c.beta2));
        let (one_b1, one_b2) = (T::from_f64c(1.0 - c.beta1), T::from_f64c(1.0 - c.beta2));
        let step = T::from_f64c(lr / bc1);
        let inv_bc2 = T::from_f64c(1.0 / bc2);
        let eps = T::from_f64c(c.eps);
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else { continue };
            let decay = if p.shape().len() >= 2 { T::from_f64c(1.0 - lr * c.weight_decay) } else { T::one() };
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![T::zero(); g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![T::zero(); g.len()]);
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + one_b1 * gi;
                *vi = b2 * *vi + one_b2 * gi * gi;
                *w = *w * decay - step * *mi / ((*vi * inv_bc2).sqrt() + eps);
            }
        }
    }
}

/// Cosine decay from `base` to zero over `total` steps after a linear warmup.
pub fn cosine_lr(base: f64, step: usize, total: usize, warmup: usize) -> f64 {
    if total == 0 {
        return 0.0;
    }
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let progress = ((step - warmup) as f64 / span as f64).min(1.0);
    base * 0.5 * (1.0 + (PI * progress).cos())
}
