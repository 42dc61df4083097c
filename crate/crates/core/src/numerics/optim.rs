//! Adam and the warmup + cosine-annealing learning-rate schedule.

use serde::{Deserialize, Serialize};

use super::array::Array;
use super::tape::{ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one pair per parameter in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Array>,
    pub v: Vec<Array>,
}

impl AdamState {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|(_, p)| Array::zeros(p.value.shape()))
                .collect()
        };
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Applies one Adam update to the parameters in `trainable` using their
    /// accumulated gradients. Every gradient is checked before anything moves.
    pub fn step(&mut self, store: &mut ParamStore, trainable: &[ParamId], lr: f64) -> Result<()> {
        for &id in trainable {
            let p = store.get(id);
            if !p.grad.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite gradient in parameter `{}`",
                    p.name
                )));
            }
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for &id in trainable {
            let i = id.index();
            let p = store.get_mut(id);
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (((w, &g), mi), vi) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(p.grad.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = beta1 * *mi + (1.0 - beta1) * g;
                *vi = beta2 * *vi + (1.0 - beta2) * g * g;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Learning rate at `step`: linear warmup from 0 to `base_lr` over
/// `warmup_steps`, then cosine annealing to 0 at `total_steps`.
pub fn lr_at(step: u64, warmup_steps: u64, base_lr: f64, total_steps: u64) -> f64 {
    let warmup = warmup_steps.max(1);
    if step < warmup {
        return base_lr * step as f64 / warmup as f64;
    }
    if step >= total_steps {
        return 0.0;
    }
    let span = total_steps - warmup;
    let progress = (step - warmup) as f64 / span as f64;
    base_lr * (1.0 + (std::f64::consts::PI * progress).cos()) / 2.0
}
