use serde::{Deserialize, Serialize};

use super::params::{ParamGroup, ParamStore};
use crate::error::{Result, SsmError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    /// Learning rate for [`ParamGroup::Dynamics`].
    pub lr_dynamics: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay, applied to the default group only.
    pub weight_decay: f64,
    /// Global gradient-norm cap; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            lr_dynamics: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            clip_norm: Some(1.0),
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(SsmError::InvalidArgument(format!("adam: {what}")));
        if !(self.lr > 0.0) || !(self.lr_dynamics > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if !(self.eps > 0.0) || self.weight_decay < 0.0 {
            return bad("eps must be positive and weight decay non-negative");
        }
        if matches!(self.clip_norm, Some(c) if !(c > 0.0)) {
            return bad("clip norm must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

/// Outcome of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepInfo {
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub clipped: bool,
}

impl AdamState {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Result<Self> {
        config.validate()?;
        Ok(AdamState {
            config,
            m: vec![0.0; store.len()],
            v: vec![0.0; store.len()],
            t: 0,
        })
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One bias-corrected update from the gradients held in `store`.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<StepInfo> {
        if self.m.len() != store.len() {
            return Err(SsmError::shape("AdamState moments", store.len(), self.m.len()));
        }
        if let Some(i) = store.grads().iter().position(|g| !g.is_finite()) {
            let (segment, index) = store.locate(i);
            return Err(SsmError::NonFiniteGradient { segment, index });
        }
        let grad_norm = store.grad_norm();
        let scale = match self.config.clip_norm {
            Some(c) if grad_norm > c => c / grad_norm,
            _ => 1.0,
        };
        self.t += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let groups: Vec<ParamGroup> = store
            .segments()
            .iter()
            .flat_map(|s| std::iter::repeat_n(s.group, s.len()))
            .collect();
        let grads = store.grads().to_vec();
        let values = store.values_mut();
        for i in 0..values.len() {
            let g = grads[i] * scale;
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * g;
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            let (lr, wd) = match groups[i] {
                ParamGroup::Default => (c.lr, c.weight_decay),
                ParamGroup::Dynamics => (c.lr_dynamics, 0.0),
            };
            values[i] -= lr * (mhat / (vhat.sqrt() + c.eps) + wd * values[i]);
        }
        store.step += 1;
        Ok(StepInfo {
            grad_norm,
            clipped: scale < 1.0,
        })
    }
}
