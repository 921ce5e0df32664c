use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

/// Optimizer hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_proportion: f64,
    /// `None` keeps the learning rate constant.
    pub total_steps: Option<u64>,
}

impl AdamConfig {
    /// Linear warm-up over the first 10% of `total_steps`, then linear decay to zero.
    pub fn scheduled(lr: f64, total_steps: u64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-6,
            weight_decay: 0.01,
            warmup_proportion: 0.1,
            total_steps: Some(total_steps),
        }
    }

    pub fn constant(lr: f64) -> Self {
        AdamConfig {
            total_steps: None,
            ..Self::scheduled(lr, 0)
        }
    }

    pub fn warmup_steps(&self) -> u64 {
        self.total_steps
            .map(|t| (self.warmup_proportion * t as f64).round() as u64)
            .unwrap_or(0)
    }

    /// Learning rate applied on the `step`-th update (1-based).
    pub fn lr_at(&self, step: u64) -> f64 {
        let Some(total) = self.total_steps else {
            return self.lr;
        };
        let warm = self.warmup_steps();
        if step <= warm {
            self.lr * step as f64 / warm as f64
        } else if step > total {
            0.0
        } else {
            // the last scheduled step still moves; the rate reaches zero just after it
            self.lr * (total + 1 - step) as f64 / (total - warm) as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    /// Per-element update counts; they diverge only under masked updates.
    t: Vec<u32>,
}

/// Adam with bias correction and decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamState {
    config: AdamConfig,
    step: u64,
    moments: BTreeMap<String, Moments>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        AdamState {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        self.config.lr_at(self.step.max(1))
    }

    /// Updates every parameter that requires grad. A participating parameter with no
    /// gradient is a contract error.
    pub fn step<'p>(
        &mut self,
        params: impl IntoIterator<Item = (&'p str, &'p mut Tensor)>,
    ) -> Result<()> {
        self.update(params.into_iter().map(|(n, t)| (n, t, None)))
    }

    /// Like [`AdamState::step`], but each parameter is only touched where its mask is set;
    /// masked-out elements keep their values and moments.
    pub fn step_masked<'p>(
        &mut self,
        params: impl IntoIterator<Item = (&'p str, &'p mut Tensor, &'p [bool])>,
    ) -> Result<()> {
        self.update(params.into_iter().map(|(n, t, m)| (n, t, Some(m))))
    }

    fn update<'p>(
        &mut self,
        params: impl Iterator<Item = (&'p str, &'p mut Tensor, Option<&'p [bool]>)>,
    ) -> Result<()> {
        let params: Vec<_> = params.filter(|(_, t, _)| t.requires_grad()).collect();
        if let Some((name, _, _)) = params.iter().find(|(_, t, _)| t.grad().is_none()) {
            return Err(Error::Contract(format!(
                "parameter `{name}` has no gradient"
            )));
        }
        self.step += 1;
        let c = self.config;
        let lr = c.lr_at(self.step);
        for (name, tensor, mask) in params {
            let n = tensor.numel();
            if let Some(mask) = mask {
                if mask.len() != n {
                    return Err(Error::Shape(format!(
                        "mask of {} entries for `{name}` with {n} values",
                        mask.len()
                    )));
                }
            }
            let mom = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| Moments {
                    m: vec![0.0; n],
                    v: vec![0.0; n],
                    t: vec![0; n],
                });
            if mom.m.len() != n {
                return Err(Error::Shape(format!(
                    "moment extent {} does not match `{name}` with {n} values",
                    mom.m.len()
                )));
            }
            let grad = tensor.grad().expect("checked above").to_vec();
            let values = tensor.values_mut();
            for i in 0..n {
                if mask.is_some_and(|m| !m[i]) {
                    continue;
                }
                let g = grad[i];
                mom.t[i] += 1;
                let t = mom.t[i] as i32;
                mom.m[i] = c.beta1 * mom.m[i] + (1.0 - c.beta1) * g;
                mom.v[i] = c.beta2 * mom.v[i] + (1.0 - c.beta2) * g * g;
                let m_hat = mom.m[i] / (1.0 - c.beta1.powi(t));
                let v_hat = mom.v[i] / (1.0 - c.beta2.powi(t));
                values[i] -= lr * (m_hat / (v_hat.sqrt() + c.eps) + c.weight_decay * values[i]);
            }
        }
        Ok(())
    }
}
