//! AdamW with linear warm-up and cosine decay.

use std::f64::consts::PI;

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay, applied only to matrices with more than one row.
    pub weight_decay: f64,
    pub warmup_steps: usize,
    /// Length of the cosine schedule; the rate stays at the floor afterwards.
    pub total_steps: usize,
    /// Final rate as a fraction of `lr`.
    pub min_lr_ratio: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            warmup_steps: 10,
            total_steps: 200,
            min_lr_ratio: 0.1,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && (0.0..=1.0).contains(&self.min_lr_ratio);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid optimizer settings {self:?}")))
        }
    }

    /// Learning rate for the update that follows `step` completed updates.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        let floor = self.lr * self.min_lr_ratio;
        floor + (self.lr - floor) * 0.5 * (1.0 + (PI * progress).cos())
    }
}

/// Optimizer state. Moments exist only for tensors that have been updated.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub m: ParamStore,
    pub v: ParamStore,
    pub step: usize,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            m: ParamStore::new(),
            v: ParamStore::new(),
            step: 0,
        }
    }

    /// One update of every tensor for which `trainable` holds. Other tensors
    /// are left bit-identical.
    pub fn update(&mut self, params: &mut ParamStore, grads: &ParamStore, trainable: impl Fn(&str) -> bool) {
        let c = self.config;
        let lr = c.lr_at(self.step);
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (name, w) in params.iter_mut() {
            if !trainable(name) {
                continue;
            }
            let Some(g) = grads.get(name) else { continue };
            if !self.m.contains(name) {
                self.m.insert(name, Array2::zeros(w.raw_dim()));
                self.v.insert(name, Array2::zeros(w.raw_dim()));
            }
            let m = self.m.get_mut(name).unwrap();
            Zip::from(&mut *m).and(g).for_each(|m, &g| *m = c.beta1 * *m + (1.0 - c.beta1) * g);
            let v = self.v.get_mut(name).unwrap();
            Zip::from(&mut *v).and(g).for_each(|v, &g| *v = c.beta2 * *v + (1.0 - c.beta2) * g * g);
            let m = self.m.get(name).unwrap();
            let v = self.v.get(name).unwrap();
            let decay = if w.nrows() > 1 { c.weight_decay } else { 0.0 };
            Zip::from(w).and(m).and(v).for_each(|w, &m, &v| {
                let step = (m / bc1) / ((v / bc2).sqrt() + c.eps);
                *w -= lr * (step + decay * *w);
            });
        }
    }
}
