//! Run configuration: TOML files with strict key checking.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::TaskSpec;
use crate::grpo::ClipConfig;
use crate::optim::AdamWConfig;
use crate::reweight::{ReweightConfig, ReweightMode};
use crate::sampler::SamplerConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config file: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("total_steps must be >= 1")]
    NoSteps,
    #[error("task list is empty")]
    NoTasks,
    #[error("method {method:?} requires reweight.mode = {expected:?}, got {got:?}")]
    MethodModeMismatch {
        method: Method,
        expected: ReweightMode,
        got: ReweightMode,
    },
    #[error("improvement_clip must be > 0")]
    BadImprovementClip,
    #[error("eval_every must be >= 1")]
    BadEvalCadence,
}

/// Training method: the three reweighting variants plus baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    MtgrpoIwu,
    MtgrpoRegularized,
    MtgrpoStrict,
    /// Uniform task sampling, no zero-gradient filtering.
    GrpoUniform,
    /// Zero-gradient filtering and batch refill, uniform targets, no
    /// inflation or per-task count enforcement.
    DapoUniform,
    /// Approximate advantage-magnitude task prioritization (the cited
    /// method's internals are out of scope; this is a labeled stand-in).
    SecApprox,
}

impl Method {
    /// Reweight mode the method requires; `None` for the non-reweighting
    /// baselines, which hold z fixed (uniform or sampler-driven).
    pub fn required_mode(&self) -> Option<ReweightMode> {
        match self {
            Method::MtgrpoIwu => Some(ReweightMode::Iwu),
            Method::MtgrpoRegularized => Some(ReweightMode::Regularized),
            Method::MtgrpoStrict => Some(ReweightMode::Strict),
            _ => None,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Method::MtgrpoIwu => "mtgrpo-iwu",
            Method::MtgrpoRegularized => "mtgrpo-regularized",
            Method::MtgrpoStrict => "mtgrpo-strict",
            Method::GrpoUniform => "grpo-uniform",
            Method::DapoUniform => "dapo-uniform",
            Method::SecApprox => "sec-approx (approximate)",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    pub tasks: Vec<TaskSpec>,
    #[serde(default = "default_total_steps")]
    pub total_steps: u64,
    #[serde(default = "default_num_minibatch")]
    pub num_minibatch: usize,
    /// Evaluate held-out accuracy every this many steps (and at the last step).
    #[serde(default = "default_eval_every")]
    pub eval_every: u64,
    /// Per-task cap on evaluation prompts.
    #[serde(default = "default_eval_prompts")]
    pub eval_prompts_per_task: usize,
    /// Magnitude bound on per-task improvements I_k.
    #[serde(default = "default_improvement_clip")]
    pub improvement_clip: f64,
    /// Gaussian scale for the initial policy logits; 0 = uniform start.
    #[serde(default)]
    pub init_noise: f64,
    #[serde(default)]
    pub master_seed: u64,
    /// Smoothing decay for the sec-approx advantage-magnitude signal.
    #[serde(default = "default_sec_decay")]
    pub sec_decay: f64,
    #[serde(default)]
    pub clip: ClipConfig,
    #[serde(default)]
    pub reweight: ReweightConfig,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub optimizer: AdamWConfig,
}

fn default_total_steps() -> u64 {
    400
}
fn default_num_minibatch() -> usize {
    4
}
fn default_eval_every() -> u64 {
    5
}
fn default_eval_prompts() -> usize {
    200
}
fn default_improvement_clip() -> f64 {
    0.1
}
fn default_sec_decay() -> f64 {
    0.9
}

impl TrainConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: TrainConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.total_steps < 1 {
            return Err(ConfigError::NoSteps);
        }
        if self.tasks.is_empty() {
            return Err(ConfigError::NoTasks);
        }
        if self.improvement_clip <= 0.0 {
            return Err(ConfigError::BadImprovementClip);
        }
        if self.eval_every < 1 {
            return Err(ConfigError::BadEvalCadence);
        }
        if let Some(expected) = self.method.required_mode() {
            // Fixed-uniform is always legal: it freezes the weights while
            // keeping the rest of the method's pipeline (ablation runs).
            if self.reweight.mode != expected && self.reweight.mode != ReweightMode::FixedUniform {
                return Err(ConfigError::MethodModeMismatch {
                    method: self.method,
                    expected,
                    got: self.reweight.mode,
                });
            }
        }
        Ok(())
    }
}
