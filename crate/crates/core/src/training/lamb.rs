//! Layer-wise adaptive moments optimizer (LAMB).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Upper clamp for the per-tensor trust ratio.
    pub max_trust_ratio: f64,
    /// When off, the trust ratio is fixed at 1 and the update is plain Adam
    /// with decoupled weight decay.
    pub trust_ratio: bool,
}

impl Default for LambConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-6,
            weight_decay: 1e-4,
            max_trust_ratio: 10.0,
            trust_ratio: true,
        }
    }
}

/// Moment estimates for a fixed list of tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct LambState {
    pub config: LambConfig,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

impl LambState {
    pub fn new(config: LambConfig, params: &[Tensor]) -> Self {
        Self {
            config,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            step: 0,
        }
    }

    /// Applies one update using each tensor's `grad` (missing grads count as
    /// zero). Nothing is modified if any gradient is non-finite.
    pub fn step(&mut self, params: &mut [Tensor], lr: f64) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::Shape {
                op: "lamb_step",
                lhs: vec![self.m.len()],
                rhs: vec![params.len()],
            });
        }
        for (i, p) in params.iter().enumerate() {
            if p.len() != self.m[i].len() {
                return Err(Error::Shape {
                    op: "lamb_step",
                    lhs: vec![self.m[i].len()],
                    rhs: p.shape().to_vec(),
                });
            }
            if let Some(g) = &p.grad {
                if let Some(j) = g.iter().position(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!(
                        "gradient of parameter tensor {i} at index {j}"
                    )));
                }
            }
        }
        let c = self.config;
        self.step += 1;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let mut update = Vec::new();
        for (i, p) in params.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            update.clear();
            for j in 0..m.len() {
                let g = p.grad.as_ref().map_or(0.0, |g| g[j]);
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                update.push(m_hat / (v_hat.sqrt() + c.eps) + c.weight_decay * p.data()[j]);
            }
            let w_norm = norm(p.data());
            let u_norm = norm(&update);
            let ratio = if !c.trust_ratio || w_norm == 0.0 || u_norm == 0.0 {
                1.0
            } else {
                (w_norm / u_norm).clamp(0.0, c.max_trust_ratio)
            };
            for (w, u) in p.data_mut().iter_mut().zip(&update) {
                *w -= lr * ratio * u;
            }
        }
        Ok(())
    }
}
