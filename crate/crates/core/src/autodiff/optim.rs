use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::AutodiffError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam with one pair of moment buffers per parameter.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig, store: &ParamStore) -> Self {
        let m: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.value.numel()]).collect();
        Self {
            cfg,
            v: m.clone(),
            m,
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Applies one update from the accumulated gradients, then zeroes them.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<(), AutodiffError> {
        if store.len() != self.m.len() {
            return Err(AutodiffError::Shape(format!(
                "optimizer tracks {} parameters, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        self.t += 1;
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            if m.len() != p.value.numel() {
                return Err(AutodiffError::Shape(format!(
                    "moment buffer for {} has {} entries, parameter has {}",
                    p.name,
                    m.len(),
                    p.value.numel()
                )));
            }
            let (value, grad) = (p.value.data_mut(), p.grad.data());
            adam_update(value, grad, m, v, &self.cfg, self.t);
        }
        store.zero_grad();
        Ok(())
    }
}

/// One in-place Adam update at step `t >= 1`.
pub fn adam_update(
    value: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    cfg: &AdamConfig,
    t: u64,
) {
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..value.len() {
        let g = grad[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        value[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}
