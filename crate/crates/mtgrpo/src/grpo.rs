//! Group-relative advantages, the clipped token-level surrogate, and the
//! policy update.
//!
//! Advantages are computed per rollout group by within-group normalization
//! (population std) and broadcast to every token of the rollout. Groups whose
//! reward std falls below `std_floor` are flagged zero-gradient and contribute
//! exactly nothing to parameter updates.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::optim::{AdamWConfig, AdamWState};
use crate::policy::{refresh_current_logps, GradBuffer, PolicyParams, RolloutGroup};

#[derive(Debug, Error)]
pub enum GrpoError {
    #[error("group size must be >= 2, got {0}")]
    GroupTooSmall(usize),
    #[error("batch is empty after filtering")]
    EmptyBatch,
    #[error("non-finite importance ratio (parameter blow-up)")]
    NonFiniteRatio,
    #[error("non-finite gradient")]
    NonFiniteGradient,
}

/// Clipping and KL settings for the surrogate.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClipConfig {
    /// Lower clip width: ratios below `1 - clip_low` are clipped.
    pub clip_low: f64,
    /// Upper clip width: ratios above `1 + clip_high` are clipped.
    pub clip_high: f64,
    pub kl_coeff: f64,
    pub std_floor: f64,
}

impl Default for ClipConfig {
    fn default() -> Self {
        ClipConfig {
            clip_low: 0.2,
            clip_high: 0.28,
            kl_coeff: 0.0,
            std_floor: 1e-8,
        }
    }
}

/// Normalized per-rollout advantages for one group.
#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageSet {
    pub values: Vec<f64>,
    pub group_mean: f64,
    pub group_std: f64,
    pub is_zero_gradient: bool,
}

pub fn group_advantages(rewards: &[f64], cfg: &ClipConfig) -> Result<AdvantageSet, GrpoError> {
    let g = rewards.len();
    if g < 2 {
        return Err(GrpoError::GroupTooSmall(g));
    }
    let mean = rewards.iter().sum::<f64>() / g as f64;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / g as f64;
    let std = var.sqrt();
    if std < cfg.std_floor {
        return Ok(AdvantageSet {
            values: vec![0.0; g],
            group_mean: mean,
            group_std: std,
            is_zero_gradient: true,
        });
    }
    Ok(AdvantageSet {
        values: rewards.iter().map(|r| (r - mean) / std).collect(),
        group_mean: mean,
        group_std: std,
        is_zero_gradient: false,
    })
}

pub fn f_kl(u: f64) -> f64 {
    u - u.ln() - 1.0
}

/// Clipped token-level surrogate for one group, from its stored log-probs.
///
/// `(1/G) sum_i (1/L) sum_t [min(r A, clip(r, 1-lo, 1+hi) A) - kl * r * f_kl(pi_ref/pi)]`
pub fn clipped_surrogate(
    group: &RolloutGroup,
    adv: &AdvantageSet,
    cfg: &ClipConfig,
) -> Result<f64, GrpoError> {
    let g = group.group_size() as f64;
    let mut total = 0.0;
    for i in 0..group.group_size() {
        let len = group.logp_cur[i].len() as f64;
        let a = adv.values[i];
        let mut seq = 0.0;
        for t in 0..group.logp_cur[i].len() {
            let r = (group.logp_cur[i][t] - group.logp_old[i][t]).exp();
            if !r.is_finite() {
                return Err(GrpoError::NonFiniteRatio);
            }
            let clipped = r.clamp(1.0 - cfg.clip_low, 1.0 + cfg.clip_high);
            seq += (r * a).min(clipped * a);
            if cfg.kl_coeff != 0.0 {
                let u = (group.logp_ref[i][t] - group.logp_cur[i][t]).exp();
                seq -= cfg.kl_coeff * r * f_kl(u);
            }
        }
        total += seq / len;
    }
    Ok(total / g)
}

/// Re-evaluate the surrogate with `logp_cur` refreshed from `params`.
pub fn surrogate_at(
    params: &PolicyParams,
    group: &RolloutGroup,
    adv: &AdvantageSet,
    cfg: &ClipConfig,
) -> Result<f64, GrpoError> {
    let mut fresh = group.clone();
    refresh_current_logps(&mut fresh, params);
    clipped_surrogate(&fresh, adv, cfg)
}

/// Analytic gradient of [`clipped_surrogate`] w.r.t. the current parameters,
/// accumulated into `grad` with an overall `scale`.
///
/// Groups flagged zero-gradient are skipped outright, so their contribution
/// is exactly zero. Token terms on the clipped branch contribute no gradient.
pub fn accumulate_surrogate_grad(
    params: &PolicyParams,
    group: &RolloutGroup,
    adv: &AdvantageSet,
    cfg: &ClipConfig,
    scale: f64,
    grad: &mut GradBuffer,
) -> Result<(), GrpoError> {
    if adv.is_zero_gradient {
        return Ok(());
    }
    let g = group.group_size() as f64;
    for i in 0..group.group_size() {
        let len = group.logp_cur[i].len() as f64;
        let a = adv.values[i];
        for t in 0..group.logp_cur[i].len() {
            let lp_cur = group.logp_cur[i][t];
            let r = (lp_cur - group.logp_old[i][t]).exp();
            if !r.is_finite() {
                return Err(GrpoError::NonFiniteRatio);
            }
            let clipped = r.clamp(1.0 - cfg.clip_low, 1.0 + cfg.clip_high);
            // d/d theta min(rA, clip(r)A): flows through r only when the
            // unclipped branch attains the min.
            let mut coeff = if r * a <= clipped * a { a * r } else { 0.0 };
            if cfg.kl_coeff != 0.0 {
                let lp_ref = group.logp_ref[i][t];
                coeff -= cfg.kl_coeff * r * (lp_cur - lp_ref);
            }
            if coeff != 0.0 {
                params.accumulate_token_grad(
                    group.prompt,
                    t,
                    group.answers[i][t],
                    scale * coeff / (g * len),
                    grad,
                );
            }
        }
    }
    Ok(())
}

/// Raw z-weighted batch gradient: `sum_k z_k * mean over task-k groups`.
pub fn batch_gradient(
    params: &PolicyParams,
    batch: &[(RolloutGroup, AdvantageSet)],
    cfg: &ClipConfig,
    weights: &[f64],
) -> Result<GradBuffer, GrpoError> {
    let mut grad = GradBuffer::zeros_like(params);
    let mut counts = vec![0usize; weights.len()];
    for (group, _) in batch {
        counts[group.prompt.task_id] += 1;
    }
    for (group, adv) in batch {
        let k = group.prompt.task_id;
        accumulate_surrogate_grad(params, group, adv, cfg, weights[k] / counts[k] as f64, &mut grad)?;
    }
    if !grad.is_finite() {
        return Err(GrpoError::NonFiniteGradient);
    }
    Ok(grad)
}

/// One training step of policy updates over the batch.
///
/// The batch is split into `num_minibatch` contiguous chunks in its canonical
/// order; each chunk triggers one optimizer sub-update with `logp_old` (and
/// the advantages) held fixed while `logp_cur` is refreshed from the evolving
/// parameters.
pub fn policy_update(
    params: &mut PolicyParams,
    batch: &[(RolloutGroup, AdvantageSet)],
    cfg: &ClipConfig,
    opt_cfg: &AdamWConfig,
    opt_state: &mut AdamWState,
    weights: &[f64],
    num_minibatch: usize,
) -> Result<(), GrpoError> {
    if batch.is_empty() {
        return Err(GrpoError::EmptyBatch);
    }
    let num_minibatch = num_minibatch.max(1).min(batch.len());
    let chunk = batch.len().div_ceil(num_minibatch);
    for sub in batch.chunks(chunk) {
        let mut fresh: Vec<(RolloutGroup, AdvantageSet)> = sub.to_vec();
        for (group, _) in fresh.iter_mut() {
            refresh_current_logps(group, params);
        }
        let grad = batch_gradient(params, &fresh, cfg, weights)?;
        let flat_grad = grad.flat();
        let mut flat = params.flat();
        opt_state.ascend(opt_cfg, &mut flat, &flat_grad);
        params.apply_flat(|i, w| *w = flat[i]);
    }
    Ok(())
}

/// Per-task mean clipped surrogate over the batch; `None` for absent tasks.
pub fn task_losses(
    params: &PolicyParams,
    batch: &[(RolloutGroup, AdvantageSet)],
    cfg: &ClipConfig,
    num_tasks: usize,
) -> Result<Vec<Option<f64>>, GrpoError> {
    let mut sums = vec![0.0; num_tasks];
    let mut counts = vec![0usize; num_tasks];
    for (group, adv) in batch {
        let k = group.prompt.task_id;
        sums[k] += surrogate_at(params, group, adv, cfg)?;
        counts[k] += 1;
    }
    Ok(sums
        .into_iter()
        .zip(counts)
        .map(|(s, c)| if c > 0 { Some(s / c as f64) } else { None })
        .collect())
}

/// Clipped per-task improvement; entries with a missing endpoint report 0
/// with the flag set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Improvement {
    pub value: f64,
    pub missing: bool,
}

pub fn improvement(
    j_new: &[Option<f64>],
    j_old: &[Option<f64>],
    clip_mag: f64,
) -> Vec<Improvement> {
    assert_eq!(j_new.len(), j_old.len());
    assert!(clip_mag > 0.0);
    j_new
        .iter()
        .zip(j_old)
        .map(|(n, o)| match (n, o) {
            (Some(n), Some(o)) => Improvement {
                value: (n - o).clamp(-clip_mag, clip_mag),
                missing: false,
            },
            _ => Improvement {
                value: 0.0,
                missing: true,
            },
        })
        .collect()
}
