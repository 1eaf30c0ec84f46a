//! Advantage estimators, surrogate objectives, analytic gradients and AdamW.

mod adamw;
mod advantages;
mod baseline;
mod objectives;

pub use adamw::{adamw_step, AdamWConfig, OptimizerState, StepStats};
pub use advantages::{grpo_advantages, modified_grpo_advantages, remax_advantages};
pub use baseline::{baseline_gradient, baseline_loss, group_baseline_loss, BaselineParams};
pub use objectives::{
    dpo_gradient, dpo_loss, gradient, grpo_gradient, grpo_objective, objective_value, remax_gradient, remax_objective,
    GroupRollout, Objective,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Grpo,
    ModifiedGrpo,
    Remax,
    Dpo,
}

/// Where ReMax takes its baseline from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RemaxBaseline {
    /// Linear value head on question features trained with a scaled MSE loss.
    #[default]
    Learned,
    /// Reward of the greedy (argmax) response.
    Greedy,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HyperParams {
    pub actor_lr: f64,
    pub kl_coeff: f64,
    pub clip_eps: f64,
    pub group_size: usize,
    pub entropy_coeff: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub grad_clip_norm: f64,
    pub baseline_lr: f64,
    pub baseline_loss_scale: f64,
    pub remax_baseline: RemaxBaseline,
    pub dpo_beta: f64,
    pub dpo_lr: f64,
    pub dpo_epochs: usize,
    pub dpo_batch: usize,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            actor_lr: 1e-6,
            kl_coeff: 0.005,
            clip_eps: 0.20,
            group_size: 4,
            entropy_coeff: 0.001,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.0,
            grad_clip_norm: 1.0,
            baseline_lr: 1e-6,
            baseline_loss_scale: 0.5,
            remax_baseline: RemaxBaseline::Learned,
            dpo_beta: 0.1,
            dpo_lr: 1e-5,
            dpo_epochs: 4,
            dpo_batch: 128,
        }
    }
}

impl HyperParams {
    /// Defaults with the algorithm-specific actor learning rate (ReMax doubles it).
    pub fn for_algorithm(algorithm: Algorithm) -> Self {
        let mut hp = Self::default();
        if algorithm == Algorithm::Remax {
            hp.actor_lr = 2e-6;
        }
        hp
    }

    pub fn actor_optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.actor_lr,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
            clip_norm: self.grad_clip_norm,
        }
    }

    pub fn baseline_optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.baseline_lr,
            ..self.actor_optimizer()
        }
    }

    pub fn dpo_optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.dpo_lr,
            ..self.actor_optimizer()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("actor_lr", self.actor_lr),
            ("kl_coeff", self.kl_coeff),
            ("entropy_coeff", self.entropy_coeff),
            ("weight_decay", self.weight_decay),
            ("baseline_lr", self.baseline_lr),
            ("baseline_loss_scale", self.baseline_loss_scale),
            ("dpo_beta", self.dpo_beta),
            ("dpo_lr", self.dpo_lr),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidArgument(format!("{name} must be finite and >= 0")));
            }
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return Err(Error::InvalidArgument("clip_eps must lie in (0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::InvalidArgument("adam betas must lie in [0, 1)".into()));
        }
        if !(self.adam_eps > 0.0) || !(self.grad_clip_norm > 0.0) {
            return Err(Error::InvalidArgument(
                "adam_eps and grad_clip_norm must be positive".into(),
            ));
        }
        if self.group_size == 0 || self.dpo_batch == 0 {
            return Err(Error::InvalidArgument(
                "group_size and dpo_batch must be positive".into(),
            ));
        }
        Ok(())
    }
}
