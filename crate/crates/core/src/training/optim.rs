use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Rescale the batch gradient to at most this global L2 norm; 0 disables.
    pub clip_norm: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            weight_decay: 0.01,
            clip_norm: 1.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        for (f, b) in [("optimizer.beta1", self.beta1), ("optimizer.beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(f, "must lie in [0, 1)"));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("optimizer.eps", "must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("optimizer.weight_decay", "must be ≥ 0"));
        }
        if !(self.clip_norm >= 0.0) {
            return Err(Error::config("optimizer.clip_norm", "must be ≥ 0"));
        }
        Ok(())
    }
}

/// Adam with decoupled weight decay.
pub struct AdamW {
    cfg: OptimizerConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: i32,
}

impl AdamW {
    pub fn new(cfg: OptimizerConfig, params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        AdamW {
            cfg,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    /// Applies one update from the accumulated gradients. Returns false when
    /// a gradient is non-finite; parameters are then left untouched.
    pub fn step(&mut self, params: &mut ParamStore, lr: f64) -> bool {
        let sq: f64 = params
            .iter()
            .flat_map(|p| p.grad.data().iter())
            .map(|g| g * g)
            .sum();
        if !sq.is_finite() {
            return false;
        }
        let norm = sq.sqrt();
        let clip = if self.cfg.clip_norm > 0.0 && norm > self.cfg.clip_norm {
            self.cfg.clip_norm / norm
        } else {
            1.0
        };
        self.t += 1;
        let OptimizerConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
            ..
        } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        for (i, p) in params.iter_mut().enumerate() {
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for ((mi, vi), g) in m.iter_mut().zip(v.iter_mut()).zip(p.grad.data()) {
                let g = g * clip;
                *mi = beta1 * *mi + (1.0 - beta1) * g;
                *vi = beta2 * *vi + (1.0 - beta2) * g * g;
            }
            if lr == 0.0 {
                continue;
            }
            let value = std::sync::Arc::make_mut(&mut p.value);
            for ((x, mi), vi) in value.data_mut().iter_mut().zip(m.iter()).zip(v.iter()) {
                let update = (mi / c1) / ((vi / c2).sqrt() + eps) + weight_decay * *x;
                *x -= lr * update;
            }
        }
        true
    }
}
