//! PPO with generalized advantage estimation and the two-stage training
//! pipeline over vectorized damaged environments.

pub mod buffer;
pub mod train;
pub mod update;

pub use buffer::{collect_rollout, compute_gae, CollectRng, CollectStats, RolloutBuffer};
pub use train::{train, CurveRow, ModelVariant, Paradigm, TrainArtifacts, TrainConfig};
pub use update::{entropy_term, surrogate_loss, update, value_loss, UpdateStats};

use crate::{Result, UmcError};

/// PPO hyperparameters. The paper names the symbols; the numeric values are
/// standard locomotion settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PpoHyper {
    /// Discount factor gamma.
    pub gamma: f64,
    /// Bias-variance tradeoff lambda for advantage estimation.
    pub gae_lambda: f64,
    /// Clipping threshold epsilon.
    pub clip_eps: f64,
    /// Value-loss weight (lambda_1).
    pub value_coef: f64,
    /// Entropy-regularization weight (lambda_2).
    pub entropy_coef: f64,
    pub epochs: usize,
    pub minibatches: usize,
    pub lr: f64,
    pub max_grad_norm: f64,
    /// Rollout length T.
    pub horizon: usize,
    /// Parallel env count B.
    pub n_envs: usize,
}

impl Default for PpoHyper {
    fn default() -> Self {
        PpoHyper {
            gamma: 0.99,
            gae_lambda: 0.95,
            clip_eps: 0.2,
            value_coef: 1.0,
            entropy_coef: 0.01,
            epochs: 4,
            minibatches: 4,
            lr: 3e-4,
            max_grad_norm: 1.0,
            horizon: 64,
            n_envs: 256,
        }
    }
}

impl PpoHyper {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.gamma && self.gamma <= 1.0) {
            return Err(UmcError::invalid("ppo.gamma", format!("{}", self.gamma)));
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return Err(UmcError::invalid("ppo.gae_lambda", format!("{}", self.gae_lambda)));
        }
        if !(self.clip_eps > 0.0) {
            return Err(UmcError::invalid("ppo.clip_eps", format!("{}", self.clip_eps)));
        }
        if self.epochs == 0 || self.minibatches == 0 || self.horizon == 0 || self.n_envs == 0 {
            return Err(UmcError::invalid("ppo", "zero epochs/minibatches/horizon/envs"));
        }
        Ok(())
    }
}
