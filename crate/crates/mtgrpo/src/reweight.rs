//! Task-weight dynamics on the softmax-parameterized simplex.
//!
//! Weights live as logits; every update descends the weighted-signal
//! objective through the softmax Jacobian and re-derives `z`. Three signal
//! choices: reward-only (strict worst-task), improvement-aware (`s = I + lambda J`),
//! and reward-only with logit shrinkage.

use serde::{Deserialize, Serialize};

use crate::grpo::Improvement;
use crate::optim::{AdamWConfig, AdamWState};
use crate::policy::softmax;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReweightMode {
    Strict,
    Iwu,
    Regularized,
    FixedUniform,
}

/// Which optimizer drives the logit update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum LogitOptimizer {
    /// Plain gradient descent with step size `beta`.
    Plain,
    /// Adaptive moments with decoupled weight decay (`logit_lr`, `weight_decay`).
    #[default]
    Adamw,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReweightConfig {
    pub mode: ReweightMode,
    /// Plain-gradient step size.
    pub beta: f64,
    /// Reward weight in the improvement-aware signal.
    pub lambda: f64,
    /// Logit shrinkage for the regularized mode.
    pub eta: f64,
    pub optimizer: LogitOptimizer,
    pub logit_lr: f64,
    pub weight_decay: f64,
}

impl Default for ReweightConfig {
    fn default() -> Self {
        ReweightConfig {
            mode: ReweightMode::Iwu,
            beta: 1.0,
            lambda: 0.2,
            eta: 0.0,
            optimizer: LogitOptimizer::Adamw,
            logit_lr: 0.025,
            weight_decay: 1e-5,
        }
    }
}

/// Task-weight logits, the derived simplex point, and optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskWeights {
    pub xi: Vec<f64>,
    pub z: Vec<f64>,
    opt_state: AdamWState,
}

impl TaskWeights {
    /// Uniform initialization (zero logits).
    pub fn uniform(num_tasks: usize) -> Self {
        TaskWeights {
            xi: vec![0.0; num_tasks],
            z: vec![1.0 / num_tasks as f64; num_tasks],
            opt_state: AdamWState::new(num_tasks),
        }
    }

    pub fn num_tasks(&self) -> usize {
        self.xi.len()
    }

    fn rederive(&mut self) {
        self.z = softmax(&self.xi);
    }

    fn descend(&mut self, cfg: &ReweightConfig, grad: &[f64]) {
        match cfg.optimizer {
            LogitOptimizer::Plain => {
                for (xi, g) in self.xi.iter_mut().zip(grad) {
                    *xi -= cfg.beta * g;
                }
            }
            LogitOptimizer::Adamw => {
                let adam = AdamWConfig {
                    lr: cfg.logit_lr,
                    weight_decay: cfg.weight_decay,
                    ..AdamWConfig::default()
                };
                let mut xi = std::mem::take(&mut self.xi);
                self.opt_state.descend(&adam, &mut xi, grad);
                self.xi = xi;
            }
        }
        self.rederive();
    }
}

/// Gradient of `sum_k z_k(xi) s_k` w.r.t. the logits:
/// `g_k = z_k (s_k - sum_j z_j s_j)`.
pub fn softmax_weight_gradient(z: &[f64], signal: &[f64]) -> Vec<f64> {
    let weighted: f64 = z.iter().zip(signal).map(|(z, s)| z * s).sum();
    z.iter().zip(signal).map(|(z, s)| z * (s - weighted)).collect()
}

/// Reward-only worst-task update: descend on `sum_k z_k J_k`.
pub fn strict_update(w: &mut TaskWeights, rewards: &[f64], cfg: &ReweightConfig) {
    let g = softmax_weight_gradient(&w.z, rewards);
    w.descend(cfg, &g);
}

/// Improvement-aware update with signal `s_k = I_k + lambda J_k`.
pub fn iwu_update(
    w: &mut TaskWeights,
    rewards: &[f64],
    improvements: &[Improvement],
    cfg: &ReweightConfig,
) {
    let signal: Vec<f64> = improvements
        .iter()
        .zip(rewards)
        .map(|(i, j)| i.value + cfg.lambda * j)
        .collect();
    let g = softmax_weight_gradient(&w.z, &signal);
    w.descend(cfg, &g);
}

/// Reward-only update with logit shrinkage: `xi <- xi - beta (g + eta xi)`.
pub fn regularized_update(w: &mut TaskWeights, rewards: &[f64], cfg: &ReweightConfig) {
    let g = softmax_weight_gradient(&w.z, rewards);
    let shrunk: Vec<f64> = g.iter().zip(&w.xi).map(|(g, xi)| g + cfg.eta * xi).collect();
    w.descend(cfg, &shrunk);
}

/// Dispatch on the configured mode; `FixedUniform` leaves weights untouched.
pub fn update_weights(
    w: &mut TaskWeights,
    rewards: &[f64],
    improvements: &[Improvement],
    cfg: &ReweightConfig,
) {
    match cfg.mode {
        ReweightMode::Strict => strict_update(w, rewards, cfg),
        ReweightMode::Iwu => iwu_update(w, rewards, improvements, cfg),
        ReweightMode::Regularized => regularized_update(w, rewards, cfg),
        ReweightMode::FixedUniform => {}
    }
}
