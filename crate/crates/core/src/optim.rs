//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 0.005,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First and second moment buffers for one parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Optimizer state. Moment buffers are kept per parameter, aligned with the
/// store the optimizer was created for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    pub moments: Vec<Moments>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, store: &ParamStore) -> Result<Self> {
        if config.lr.is_nan() || config.lr <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive, got {}",
                config.lr
            )));
        }
        let moments = store
            .iter()
            .map(|(_, p)| Moments {
                m: vec![0.0; p.value().len()],
                v: vec![0.0; p.value().len()],
            })
            .collect();
        Ok(Self {
            config,
            step: 0,
            moments,
        })
    }

    /// One update using the gradients stored in `store`. Frozen parameters
    /// are left bit-identical.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        self.step += 1;
        let step = self.step;
        for (id, moments) in store.ids().collect::<Vec<_>>().into_iter().zip(&mut self.moments) {
            let p = store.get_mut(id);
            if !p.trainable() {
                continue;
            }
            let grad = p.grad().clone();
            adamw_update(p.value_mut(), &grad, moments, &self.config, step)?;
        }
        Ok(())
    }
}

/// A single AdamW update of `value` in place. `step` counts from 1.
pub fn adamw_update(
    value: &mut Tensor,
    grad: &Tensor,
    moments: &mut Moments,
    cfg: &AdamWConfig,
    step: u64,
) -> Result<()> {
    if cfg.lr.is_nan() || cfg.lr <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "learning rate must be positive, got {}",
            cfg.lr
        )));
    }
    if step == 0 {
        return Err(Error::InvalidArgument("step index starts at 1".into()));
    }
    let bc1 = 1.0 - cfg.beta1.powi(step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(step as i32);
    for (((x, &g), m), v) in value
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(&mut moments.m)
        .zip(&mut moments.v)
    {
        *x -= cfg.lr * cfg.weight_decay * *x;
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *x -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}
