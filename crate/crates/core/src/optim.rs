//! AdamW over groups of dense matrices.
//!
//! Weight decay is decoupled: parameters shrink multiplicatively by
//! `lr * wd` before the bias-corrected moment update, so the moments never
//! see the decay term.

use crate::error::{GvqError, Result};
use crate::tensor::Mat;

/// Hyperparameters for [`AdamW`].
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 3e-3,
            weight_decay: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return Err(GvqError::Param(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.weight_decay < 0.0 {
            return Err(GvqError::Param(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(GvqError::Param(format!("{name} must be in [0, 1), got {b}")));
            }
        }
        if self.eps <= 0.0 {
            return Err(GvqError::Param(format!("eps must be > 0, got {}", self.eps)));
        }
        Ok(())
    }
}

/// Stateful AdamW: first and second moments per parameter matrix plus the
/// shared step counter. Moment buffers are allocated lazily on the first
/// step from the gradient shapes.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    t: u64,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(AdamW { cfg, t: 0, m: Vec::new(), v: Vec::new() })
    }

    /// Steps taken so far.
    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update to every parameter in the group. `params` and
    /// `grads` must line up index-by-index with stable shapes across calls.
    pub fn step(&mut self, params: &mut [&mut Mat], grads: &[Mat]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(GvqError::Contract(format!(
                "{} params vs {} grads",
                params.len(),
                grads.len()
            )));
        }
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| Mat::zeros(g.rows, g.cols)).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(GvqError::Contract(format!(
                "optimizer state holds {} slots, got {}",
                self.m.len(),
                params.len()
            )));
        }
        self.t += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (idx, (p, g)) in params.iter_mut().zip(grads.iter()).enumerate() {
            if p.rows != g.rows || p.cols != g.cols {
                return Err(GvqError::dim("adamw_step", (p.rows, p.cols), (g.rows, g.cols)));
            }
            if self.m[idx].rows != p.rows || self.m[idx].cols != p.cols {
                return Err(GvqError::dim(
                    "adamw_state",
                    (self.m[idx].rows, self.m[idx].cols),
                    (p.rows, p.cols),
                ));
            }
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            for i in 0..p.data.len() {
                // Decoupled decay first, on the incoming parameter value.
                if c.weight_decay > 0.0 {
                    p.data[i] -= c.lr * c.weight_decay * p.data[i];
                }
                let grad = g.data[i];
                m.data[i] = c.beta1 * m.data[i] + (1.0 - c.beta1) * grad;
                v.data[i] = c.beta2 * v.data[i] + (1.0 - c.beta2) * grad * grad;
                let m_hat = m.data[i] / bc1;
                let v_hat = v.data[i] / bc2;
                p.data[i] -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}
