//! Unrolling episodes, advantage estimation, meta-training, and evaluation.

mod env;
mod eval;
mod inference;
mod rollout;
mod step;

pub use env::{RatingsEnv, TaskEnv, WorldParams};
pub use eval::{evaluate, evaluate_ridge, mean_se, run_episode, tune_ridge, Curve, EpisodeCurve, EvalReport, Selector};
pub use inference::{FastOutput, InferenceEpisode};
pub use rollout::{build_episode, episode_loss, unroll, ActionSource, EpisodeGraph, StepGraph};
pub use step::{imitation_loss, imitation_pretrain, training_step, StepMetrics, TrainEvent, Trainer};

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub gae_gamma: f64,
    pub gae_lambda: f64,
    pub value_weight: f64,
    pub entropy_weight: f64,
    /// Episodes per update; gradients are averaged over the batch.
    pub batch_size: usize,
    pub max_updates: usize,
    pub seed: u64,
    /// Global gradient-norm cap; 0 disables.
    pub grad_clip: f64,
    /// Balanced-oracle imitation updates before policy-gradient training.
    pub imitation_steps: usize,
    /// Standardize advantages over each batch before the policy term.
    pub normalize_advantages: bool,
    /// Rewards are multiplied by this before advantage estimation, so the
    /// value head predicts scaled returns. Pathwise reward terms are unscaled.
    pub return_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            gae_gamma: 1.0,
            gae_lambda: 0.95,
            value_weight: 0.5,
            entropy_weight: 0.01,
            batch_size: 16,
            max_updates: 1000,
            seed: 0,
            grad_clip: 0.0,
            imitation_steps: 0,
            normalize_advantages: true,
            return_scale: 0.05,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!("`{name}` must lie in [0, 1], got {v}")))
            }
        };
        unit("gae_gamma", self.gae_gamma)?;
        unit("gae_lambda", self.gae_lambda)?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("`lr` must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("`batch_size` must be at least 1".into()));
        }
        for (name, v) in [
            ("value_weight", self.value_weight),
            ("entropy_weight", self.entropy_weight),
            ("grad_clip", self.grad_clip),
            ("return_scale", self.return_scale),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("`{name}` must be a nonnegative number, got {v}")));
            }
        }
        Ok(())
    }
}

/// One decision of an unrolled episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Revealed indices before this step's query.
    pub known: Vec<usize>,
    pub chosen: usize,
    /// log π(chosen); 0 when a heuristic chose.
    pub log_prob: f64,
    /// Mean fast reward over the items still unlabeled after the reveal
    /// (0 when none remain).
    pub fast_reward: f64,
    /// V(h) before the query.
    pub value: f64,
    pub entropy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub seed: u64,
    pub steps: Vec<StepRecord>,
    /// Mean slow reward over the evaluation set after the final step.
    pub slow_reward: f64,
    /// Accuracy or RMSE of the final slow prediction.
    pub slow_metric: f64,
}

impl Rollout {
    /// rₜ = R̃ₜ, plus the slow reward on the last step.
    pub fn rewards(&self) -> Vec<f64> {
        let mut r: Vec<f64> = self.steps.iter().map(|s| s.fast_reward).collect();
        if let Some(last) = r.last_mut() {
            *last += self.slow_reward;
        }
        r
    }

    pub fn values(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.value).collect()
    }

    /// Σₜ R̃ₜ + R.
    pub fn total_reward(&self) -> f64 {
        self.rewards().iter().sum()
    }
}

/// Advantages and value targets by the backward recursion
/// Aₜ = δₜ + γλ·Aₜ₊₁ with δₜ = rₜ + γ·Vₜ₊₁ − Vₜ and V after the last step 0.
pub fn compute_gae(rewards: &[f64], values: &[f64], gamma: f64, lambda: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if rewards.len() != values.len() {
        return Err(Error::contract(format!(
            "{} rewards but {} value estimates",
            rewards.len(),
            values.len()
        )));
    }
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    for t in (0..n).rev() {
        let next_v = if t + 1 < n { values[t + 1] } else { 0.0 };
        let delta = rewards[t] + gamma * next_v - values[t];
        next_adv = delta + gamma * lambda * next_adv;
        adv[t] = next_adv;
    }
    let targets = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, targets))
}
