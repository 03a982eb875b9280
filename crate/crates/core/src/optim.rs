//! Adam with decoupled weight decay.

use crate::attention::NetworkParams;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |b: f64| b > 0.0 && b < 1.0;
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) || !(self.eps > 0.0) {
            return Err(Error::InvalidConfig("lr and weight_decay must be non-negative, eps positive".into()));
        }
        if !unit(self.beta1) || !unit(self.beta2) {
            return Err(Error::InvalidConfig(format!(
                "betas must lie in (0, 1), got {} and {}",
                self.beta1, self.beta2
            )));
        }
        Ok(())
    }
}

/// First and second moments for every parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: NetworkParams,
    pub v: NetworkParams,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &NetworkParams) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }

    /// One bias-corrected update:
    /// `θ -= lr * (m̂ / (sqrt(v̂) + eps) + weight_decay * θ)`.
    pub fn update(&mut self, params: &mut NetworkParams, grad: &NetworkParams, cfg: &AdamWConfig) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        let grads = grad.named_tensors();
        let ms = self.m.tensors_mut();
        let vs = self.v.tensors_mut();
        for (((mut p, (_, g)), mut m), mut v) in params.tensors_mut().into_iter().zip(grads).zip(ms).zip(vs) {
            ndarray::Zip::from(&mut p)
                .and(&g)
                .and(&mut m)
                .and(&mut v)
                .for_each(|p, &g, m, v| {
                    *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                    *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                    let m_hat = *m / c1;
                    let v_hat = *v / c2;
                    *p -= cfg.lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * *p);
                });
        }
    }
}
