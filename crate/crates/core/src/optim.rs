//! Adam with decoupled weight decay, linear warmup then linear decay.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::graph::{Grads, ParamSet};
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Fraction of `total_steps` spent warming up.
    pub warmup_frac: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 3e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01, warmup_frac: 0.05, clip_norm: Some(1.0) }
    }
}

/// Learning rate at (0-based) `step` of `total`.
pub fn scheduled_lr(cfg: &AdamWConfig, step: usize, total: usize) -> f64 {
    let total = total.max(1) as f64;
    let warm = (cfg.warmup_frac * total).ceil().max(1.0);
    let s = step as f64 + 1.0;
    if s <= warm {
        cfg.lr * s / warm
    } else {
        cfg.lr * ((total - s + 1.0) / (total - warm + 1.0)).max(0.0)
    }
}

pub struct AdamW {
    cfg: AdamWConfig,
    total_steps: usize,
    step: usize,
    m: Vec<Matrix<f32>>,
    v: Vec<Matrix<f32>>,
    decay: Vec<bool>,
    trainable: Vec<bool>,
}

impl AdamW {
    /// `trainable(name)` selects updated tensors; `decays(name)` selects
    /// those receiving weight decay.
    pub fn new(
        params: &ParamSet<f32>,
        cfg: AdamWConfig,
        total_steps: usize,
        trainable: impl Fn(&str) -> bool,
        decays: impl Fn(&str) -> bool,
    ) -> Self {
        let shapes: Vec<_> = params.iter().map(|(_, m)| Matrix::zeros(m.rows, m.cols)).collect();
        Self {
            cfg,
            total_steps,
            step: 0,
            m: shapes.clone(),
            v: shapes,
            decay: params.iter().map(|(n, _)| decays(n)).collect(),
            trainable: params.iter().map(|(n, _)| trainable(n)).collect(),
        }
    }

    pub fn trainable_mask(&self) -> &[bool] {
        &self.trainable
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Global L2 norm of the trainable gradients.
    pub fn grad_norm(&self, grads: &Grads<f32>) -> f64 {
        let mut s = 0.0f64;
        for (g, _) in grads.values.iter().zip(&self.trainable).filter(|(_, t)| **t) {
            for &x in &g.data {
                s += (x as f64) * (x as f64);
            }
        }
        libm::sqrt(s)
    }

    pub fn update(&mut self, params: &mut ParamSet<f32>, grads: &Grads<f32>) {
        let lr = scheduled_lr(&self.cfg, self.step, self.total_steps);
        self.step += 1;
        let scale = match self.cfg.clip_norm {
            Some(c) => {
                let n = self.grad_norm(grads);
                if n > c { c / n } else { 1.0 }
            }
            None => 1.0,
        };
        let t = self.step as i32;
        let bc1 = 1.0 - libm::pow(self.cfg.beta1, t as f64);
        let bc2 = 1.0 - libm::pow(self.cfg.beta2, t as f64);
        let (b1, b2) = (self.cfg.beta1 as f32, self.cfg.beta2 as f32);
        let step_size = (lr / bc1) as f32;
        let inv_bc2 = (1.0 / bc2) as f32;
        let eps = self.cfg.eps as f32;
        let wd = (lr * self.cfg.weight_decay) as f32;
        for i in 0..params.len() {
            if !self.trainable[i] {
                continue;
            }
            let g = &grads.values[i].data;
            let p = &mut params.value_mut(i).data;
            let m = &mut self.m[i].data;
            let v = &mut self.v[i].data;
            for j in 0..p.len() {
                let gj = g[j] * scale as f32;
                m[j] = b1 * m[j] + (1.0 - b1) * gj;
                v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                if self.decay[i] {
                    p[j] -= wd * p[j];
                }
                p[j] -= step_size * m[j] / (libm::sqrtf(v[j] * inv_bc2) + eps);
            }
        }
    }
}
