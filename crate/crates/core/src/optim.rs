//! Adaptive-moment optimizer over named parameters.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.5,
            beta2: 0.9,
            eps: 1e-8,
            grad_clip: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update with learning rate `lr` (which may follow a schedule).
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<()> {
        let scale = if self.config.grad_clip > 0.0 {
            let norm = grads.values().flat_map(|g| g.data()).map(|x| x * x).sum::<f64>().sqrt();
            if !norm.is_finite() {
                return Err(Error::NonFinite("gradient norm".into()));
            }
            if norm > self.config.grad_clip {
                self.config.grad_clip / norm
            } else {
                1.0
            }
        } else {
            1.0
        };
        self.step += 1;
        let AdamConfig { beta1, beta2, eps, .. } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (name, g) in grads {
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::Shape(format!("gradient for unknown parameter {name}")))?;
            if p.shape() != g.shape() {
                return Err(Error::Shape(format!("{name}: gradient shape {:?} vs {:?}", g.shape(), p.shape())));
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            for (((pi, gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let gi = gi * scale;
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                *pi -= lr * (*mi / bc1) / ((*vi / bc2).sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Moment tensors as `{prefix}m.{name}` / `{prefix}v.{name}`, plus the
    /// step count as `{prefix}step`.
    pub fn state(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (n, t) in &self.m {
            out.insert(format!("{prefix}m.{n}"), t.clone());
        }
        for (n, t) in &self.v {
            out.insert(format!("{prefix}v.{n}"), t.clone());
        }
        out.insert(format!("{prefix}step"), Tensor::scalar(self.step as f64));
        out
    }

    pub fn from_state(config: AdamConfig, prefix: &str, tensors: &BTreeMap<String, Tensor>) -> Self {
        let mut opt = Self::new(config);
        for (k, t) in tensors {
            if let Some(rest) = k.strip_prefix(prefix) {
                if let Some(n) = rest.strip_prefix("m.") {
                    opt.m.insert(n.to_string(), t.clone());
                } else if let Some(n) = rest.strip_prefix("v.") {
                    opt.v.insert(n.to_string(), t.clone());
                } else if rest == "step" {
                    opt.step = t.item() as u64;
                }
            }
        }
        opt
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_a_quadratic() {
        let mut params = ParamStore::new();
        params.insert("x", Tensor::from_vec([1, 1, 2], vec![3.0, -2.0]));
        let mut opt = Adam::new(AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            ..AdamConfig::with_lr(0.05)
        });
        for _ in 0..2000 {
            let x = params.get("x").unwrap().clone();
            let grads = BTreeMap::from([("x".to_string(), x.map(|v| 2.0 * (v - 1.0)))]);
            opt.step(&mut params, &grads, 0.05).unwrap();
        }
        for v in params.get("x").unwrap().data() {
            assert!((v - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn first_step_moves_by_lr_and_state_round_trips() {
        let mut params = ParamStore::new();
        params.insert("w", Tensor::scalar(0.0));
        let mut opt = Adam::new(AdamConfig::with_lr(0.1));
        let grads = BTreeMap::from([("w".to_string(), Tensor::scalar(4.0))]);
        opt.step(&mut params, &grads, 0.1).unwrap();
        assert!((params.get("w").unwrap().item() + 0.1).abs() < 1e-6);
        let restored = Adam::from_state(opt.config, "opt.", &opt.state("opt."));
        assert_eq!(restored, opt);
    }
}
