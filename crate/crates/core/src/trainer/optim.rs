//! Adam with bias correction and a cosine-annealed learning rate.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr_init: f64,
    pub lr_min: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr_init: 4e-4,
            lr_min: 1e-6,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            grad_clip: 0.0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_init > 0.0) || !(self.lr_min >= 0.0) || self.lr_min > self.lr_init {
            return Err(Error::invalid(
                "optimizer",
                format!("need 0 ≤ lr_min ≤ lr_init and lr_init > 0, got {} / {}", self.lr_min, self.lr_init),
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::invalid("optimizer", "betas must lie in [0, 1) and eps must be positive"));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(Error::invalid("optimizer", "grad_clip must be ≥ 0"));
        }
        Ok(())
    }
}

/// `lr_min + ½(lr_init − lr_min)(1 + cos(π·step/total))` for `0 ≤ step ≤ total`.
pub fn lr_schedule(step: usize, total_steps: usize, lr_init: f64, lr_min: f64) -> Result<f64> {
    if total_steps == 0 || step > total_steps {
        return Err(Error::invalid(
            "lr_schedule",
            format!("step {step} outside 0..={total_steps}"),
        ));
    }
    let phase = PI * step as f64 / total_steps as f64;
    Ok(lr_min + 0.5 * (lr_init - lr_min) * (1.0 + phase.cos()))
}

/// One bias-corrected Adam update of a flat parameter slice; `t ≥ 1`.
#[allow(clippy::too_many_arguments)]
pub fn adam_update(
    param: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
) {
    let c1 = 1.0 - beta1.powi(t as i32);
    let c2 = 1.0 - beta2.powi(t as i32);
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = beta1 * m[i] + (1.0 - beta1) * g;
        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        param[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// Adam state over every parameter of a store, in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of updates applied so far.
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, cfg: &OptimConfig) -> Self {
        let zeros = || store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Adam {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Applies the accumulated gradients of `store` with learning rate `lr`.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::invalid(
                "adam",
                format!("state for {} parameters, store has {}", self.m.len(), store.len()),
            ));
        }
        self.t += 1;
        for (i, p) in store.iter_mut().enumerate() {
            let grad = p.grad.data().to_vec();
            adam_update(
                p.value.data_mut(),
                &grad,
                self.m[i].data_mut(),
                self.v[i].data_mut(),
                lr,
                self.beta1,
                self.beta2,
                self.eps,
                self.t,
            );
        }
        Ok(())
    }
}

/// Euclidean norm of all accumulated gradients.
pub fn grad_norm(store: &ParamStore) -> f64 {
    store
        .iter()
        .flat_map(|(_, p)| p.grad.data().iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`; returns the pre-clip norm.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let n = grad_norm(store);
    if max_norm > 0.0 && n > max_norm {
        store.scale_grads(max_norm / n);
    }
    n
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_out_of_range() {
        assert!(lr_schedule(11, 10, 1e-3, 0.0).is_err());
        assert!(lr_schedule(0, 0, 1e-3, 0.0).is_err());
    }

    #[test]
    fn bad_config_rejected() {
        let c = OptimConfig {
            lr_init: 0.0,
            ..OptimConfig::default()
        };
        assert!(c.validate().is_err());
        let c = OptimConfig {
            beta2: 1.0,
            ..OptimConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
