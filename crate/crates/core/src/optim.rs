//! AdamW with decoupled weight decay and a cosine learning-rate schedule.

use serde::{Deserialize, Serialize};
use tdpcr_autodiff::Array;

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub min_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self { lr: 2e-4, min_lr: 1e-6, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4 }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..=self.lr).contains(&self.min_lr)
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if !ok {
            return Err(Error::Config(format!("invalid optimizer settings: {self:?}")));
        }
        Ok(())
    }

    /// Cosine decay from `lr` at step 0 to `min_lr` at `total`, no warmup.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        if total == 0 {
            return self.lr;
        }
        let t = (step.min(total) as f64) / total as f64;
        self.min_lr + 0.5 * (self.lr - self.min_lr) * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// First and second moments, allocated only for parameters trainable at construction.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub cfg: OptimConfig,
    pub total_steps: usize,
    /// Updates applied so far.
    pub t: usize,
    pub m: Vec<Option<Array<f32>>>,
    pub v: Vec<Option<Array<f32>>>,
}

impl AdamW {
    pub fn new(cfg: OptimConfig, total_steps: usize, store: &ParamStore<f32>) -> Self {
        let zeros = || store.iter().map(|(_, p)| p.trainable.then(|| Array::zeros(p.value.shape()))).collect::<Vec<_>>();
        Self { cfg, total_steps, t: 0, m: zeros(), v: zeros() }
    }

    /// Scalars held across both moment buffers.
    pub fn state_len(&self) -> usize {
        self.m.iter().chain(&self.v).flatten().map(|a| a.len()).sum()
    }

    pub fn current_lr(&self) -> f64 {
        self.cfg.lr_at(self.t, self.total_steps)
    }

    /// Applies one update; parameters without a gradient or without state are untouched.
    pub fn step(&mut self, store: &mut ParamStore<f32>, grads: &[Option<Array<f32>>]) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::Shape(format!("{} gradients / {} moments for {} parameters", grads.len(), self.m.len(), store.len())));
        }
        let c = self.cfg;
        let lr = self.current_lr();
        self.t += 1;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let (b1, b2, eps, wd) = (c.beta1 as f32, c.beta2 as f32, c.eps as f32, c.weight_decay);
        for (i, (_, p)) in store.iter_mut().enumerate() {
            let (Some(g), Some(m), Some(v)) = (&grads[i], &mut self.m[i], &mut self.v[i]) else {
                continue;
            };
            if !p.trainable {
                continue;
            }
            if g.shape() != p.value.shape() {
                return Err(Error::Shape(format!("gradient {:?} for {} {:?}", g.shape(), p.name, p.value.shape())));
            }
            let step_size = (lr / bc1) as f32;
            let inv_bc2 = (1.0 / bc2) as f32;
            let decay = (1.0 - lr * wd) as f32;
            let (m, v) = (m.data_mut(), v.data_mut());
            for (((w, &gi), mi), vi) in p.value.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                *w = *w * decay - step_size * *mi / ((*vi * inv_bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}
