//! Ratio-preserving batch construction.
//!
//! Builds training batches whose post-filter task proportions track the
//! target weights: multinomial target counts, acceptance-aware inflation of
//! the generation distribution, zero-gradient filtering, deficiency-aware
//! resampling rounds, and trimming back to the batch size. Generation within
//! a round is data-parallel; stream-addressed RNG keeps parallel and
//! sequential execution bit-identical.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::env::{PromptInstance, TaskSuite, REWARD_CORRECT};
use crate::grpo::{group_advantages, AdvantageSet, ClipConfig, GrpoError};
use crate::policy::{sample_rollouts, PolicyError, PolicyParams, RolloutGroup};
use crate::rngs::{self, tags};

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("target distribution is not a simplex point")]
    NotSimplex,
    #[error("batch size must be >= 1")]
    EmptyBatch,
    #[error("oversample factor must be >= 1")]
    BadOversample,
    #[error("max inflation factor must be >= 1, got {0}")]
    BadInflation(f64),
    #[error("filtered count {filtered} exceeds generated count {generated} for task {task_id}")]
    FilteredExceedsGenerated {
        task_id: usize,
        filtered: usize,
        generated: usize,
    },
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Grpo(#[from] GrpoError),
}

/// Which groups count as informative.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum FilterPolicy {
    /// Keep groups with at least one fully correct and one not-fully-correct rollout.
    #[default]
    Strict,
    /// Keep any group with non-constant rewards.
    Lenient,
}

impl FilterPolicy {
    pub fn keeps(&self, rewards: &[f64], adv: &AdvantageSet) -> bool {
        match self {
            FilterPolicy::Strict => {
                rewards.contains(&REWARD_CORRECT) && rewards.iter().any(|&r| r != REWARD_CORRECT)
            }
            FilterPolicy::Lenient => !adv.is_zero_gradient,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    /// Target post-filter batch size B.
    pub batch_size: usize,
    /// Rollouts per prompt N.
    pub group_size: usize,
    /// Oversampling factor M_os.
    pub oversample_factor: usize,
    /// Maximum deficiency-aware resampling rounds N_rs.
    pub max_resamples: usize,
    /// Cap on the acceptance inflation factor M_acc.
    pub max_inflation: f64,
    pub ema_decay: f64,
    pub filter: FilterPolicy,
    /// Acceptance-aware inflation toggle; off forces m_k = 1.
    pub aas_enabled: bool,
    /// Per-task target count enforcement; off gives DAPO-style filling.
    pub enforce_ratios: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            batch_size: 32,
            group_size: 8,
            oversample_factor: 3,
            max_resamples: 10,
            max_inflation: 5.0,
            ema_decay: 0.9,
            filter: FilterPolicy::Strict,
            aas_enabled: true,
            enforce_ratios: true,
        }
    }
}

const RHO_CAP: f64 = 1.0 - 1e-6;

/// Tracked per-task filtered ratios with running tallies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterStats {
    pub rho: Vec<f64>,
    pub ema_decay: f64,
    pub counts_seen: Vec<u64>,
    pub counts_filtered: Vec<u64>,
}

impl FilterStats {
    pub fn new(num_tasks: usize, ema_decay: f64) -> Self {
        FilterStats {
            rho: vec![0.0; num_tasks],
            ema_decay,
            counts_seen: vec![0; num_tasks],
            counts_filtered: vec![0; num_tasks],
        }
    }
}

/// EMA update of the tracked filter rates from one step's tallies.
pub fn update_filter_stats(
    stats: &mut FilterStats,
    generated: &[usize],
    filtered: &[usize],
) -> Result<(), SamplerError> {
    for (k, (&g, &f)) in generated.iter().zip(filtered).enumerate() {
        if f > g {
            return Err(SamplerError::FilteredExceedsGenerated {
                task_id: k,
                filtered: f,
                generated: g,
            });
        }
        stats.counts_seen[k] += g as u64;
        stats.counts_filtered[k] += f as u64;
        if g > 0 {
            let obs = f as f64 / g as f64;
            stats.rho[k] =
                (stats.ema_decay * stats.rho[k] + (1.0 - stats.ema_decay) * obs).min(RHO_CAP);
        }
    }
    Ok(())
}

/// `m_k = min(1 / (1 - rho_k), M_acc)`
pub fn inflation_factors(stats: &FilterStats, max_inflation: f64) -> Result<Vec<f64>, SamplerError> {
    if max_inflation < 1.0 {
        return Err(SamplerError::BadInflation(max_inflation));
    }
    Ok(stats
        .rho
        .iter()
        .map(|&r| (1.0 / (1.0 - r)).min(max_inflation))
        .collect())
}

/// `z_hat_k = z_k m_k / sum_j z_j m_j`
pub fn recalibrated_dist(z: &[f64], m: &[f64]) -> Vec<f64> {
    let total: f64 = z.iter().zip(m).map(|(z, m)| z * m).sum();
    z.iter().zip(m).map(|(z, m)| z * m / total).collect()
}

/// Multinomial counts for `draws` samples over `dist`.
pub fn desired_counts<R: Rng>(
    dist: &[f64],
    draws: usize,
    rng: &mut R,
) -> Result<Vec<usize>, SamplerError> {
    let sum: f64 = dist.iter().sum();
    if dist.iter().any(|&p| p < 0.0) || (sum - 1.0).abs() > 1e-9 {
        return Err(SamplerError::NotSimplex);
    }
    if draws < 1 {
        return Err(SamplerError::EmptyBatch);
    }
    let mut counts = vec![0usize; dist.len()];
    for _ in 0..draws {
        let u: f64 = rng.random::<f64>() * sum;
        let mut acc = 0.0;
        let mut pick = dist.len() - 1;
        for (k, &p) in dist.iter().enumerate() {
            acc += p;
            if u < acc {
                pick = k;
                break;
            }
        }
        counts[pick] += 1;
    }
    Ok(counts)
}

/// Partition groups into kept/dropped under `policy`, tallying per task.
pub fn zero_grad_filter(
    groups: Vec<(RolloutGroup, AdvantageSet)>,
    policy: FilterPolicy,
    num_tasks: usize,
) -> (Vec<(RolloutGroup, AdvantageSet)>, Vec<usize>, Vec<usize>) {
    let mut generated = vec![0usize; num_tasks];
    let mut filtered = vec![0usize; num_tasks];
    let mut kept = Vec::with_capacity(groups.len());
    for (group, adv) in groups {
        let k = group.prompt.task_id;
        generated[k] += 1;
        if policy.keeps(&group.rewards, &adv) {
            kept.push((group, adv));
        } else {
            filtered[k] += 1;
        }
    }
    (kept, generated, filtered)
}

/// Produces one scored rollout group per `(task, round, slot)` address.
/// Implementations must be deterministic in the address so generation can
/// run in any order.
pub trait GroupSource: Sync {
    fn generate(
        &self,
        task_id: usize,
        round: u64,
        slot: u64,
    ) -> Result<(RolloutGroup, AdvantageSet), SamplerError>;
}

/// Real rollout generation from the current policy over the task suite.
pub struct PolicySource<'a> {
    pub suite: &'a TaskSuite,
    pub current: &'a PolicyParams,
    pub reference: &'a PolicyParams,
    pub clip: &'a ClipConfig,
    pub group_size: usize,
    pub master_seed: u64,
    pub step: u64,
}

impl GroupSource for PolicySource<'_> {
    fn generate(
        &self,
        task_id: usize,
        round: u64,
        slot: u64,
    ) -> Result<(RolloutGroup, AdvantageSet), SamplerError> {
        let addr = (round << 32) | task_id as u64;
        let mut rng = rngs::stream_for(self.master_seed, tags::ROLLOUT, self.step, addr, slot);
        let spec = self.suite.spec(task_id).map_err(PolicyError::Env)?;
        let prompt = PromptInstance {
            task_id,
            prompt_id: rng.random_range(0..spec.num_prompts),
        };
        let group = sample_rollouts(
            self.current,
            self.reference,
            self.suite,
            prompt,
            self.group_size,
            &mut rng,
        )?;
        let adv = group_advantages(&group.rewards, self.clip)?;
        Ok((group, adv))
    }
}

/// Synthetic acceptance oracle: each task accepts with a fixed probability,
/// producing dummy two-rollout groups with mixed or constant rewards. Used
/// to test the sampler's statistical properties without real rollouts.
pub struct OracleSource {
    pub accept_probs: Vec<f64>,
    pub master_seed: u64,
    pub step: u64,
}

impl GroupSource for OracleSource {
    fn generate(
        &self,
        task_id: usize,
        round: u64,
        slot: u64,
    ) -> Result<(RolloutGroup, AdvantageSet), SamplerError> {
        let addr = (round << 32) | task_id as u64;
        let mut rng = rngs::stream_for(self.master_seed, tags::ORACLE, self.step, addr, slot);
        let accepted = rng.random::<f64>() < self.accept_probs[task_id];
        let rewards = if accepted {
            vec![1.0, 0.0]
        } else {
            vec![0.0, 0.0]
        };
        let lp = vec![vec![(0.5f64).ln()], vec![(0.5f64).ln()]];
        let group = RolloutGroup {
            prompt: PromptInstance {
                task_id,
                prompt_id: 0,
            },
            answers: vec![vec![0], vec![1]],
            rewards: rewards.clone(),
            logp_cur: lp.clone(),
            logp_old: lp.clone(),
            logp_ref: lp,
        };
        let adv = group_advantages(&rewards, &ClipConfig::default())?;
        Ok((group, adv))
    }
}

/// Sampling plan for one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub target_counts: Vec<usize>,
    pub inflated_dist: Vec<f64>,
    pub oversample_total: usize,
}

/// Post-filter batch plus the telemetry the harness emits per step.
#[derive(Debug)]
pub struct AcceptedBatch {
    pub groups: Vec<(RolloutGroup, AdvantageSet)>,
    pub per_task_counts: Vec<usize>,
    pub resample_rounds_used: usize,
    pub undersized: bool,
    pub per_task_generated: Vec<usize>,
    pub per_task_filtered: Vec<usize>,
    pub plan: BatchPlan,
}

fn generate_counts<S: GroupSource>(
    source: &S,
    counts: &[usize],
    round: u64,
) -> Result<Vec<(RolloutGroup, AdvantageSet)>, SamplerError> {
    let jobs: Vec<(usize, u64)> = counts
        .iter()
        .enumerate()
        .flat_map(|(k, &n)| (0..n as u64).map(move |slot| (k, slot)))
        .collect();
    run_jobs(source, &jobs, round)
}

#[cfg(feature = "parallel")]
fn run_jobs<S: GroupSource>(
    source: &S,
    jobs: &[(usize, u64)],
    round: u64,
) -> Result<Vec<(RolloutGroup, AdvantageSet)>, SamplerError> {
    jobs.par_iter()
        .map(|&(k, slot)| source.generate(k, round, slot))
        .collect()
}

#[cfg(not(feature = "parallel"))]
fn run_jobs<S: GroupSource>(
    source: &S,
    jobs: &[(usize, u64)],
    round: u64,
) -> Result<Vec<(RolloutGroup, AdvantageSet)>, SamplerError> {
    jobs.iter()
        .map(|&(k, slot)| source.generate(k, round, slot))
        .collect()
}

/// Run the full sampler for one step.
///
/// Plans target counts under `z`, oversamples from the inflated distribution,
/// filters, resamples against deficiencies, then trims and fills to exactly
/// the batch size. `stats` is updated from this step's aggregate per-task
/// filtered fractions.
pub fn rp_sample<S: GroupSource>(
    source: &S,
    z: &[f64],
    cfg: &SamplerConfig,
    stats: &mut FilterStats,
    master_seed: u64,
    step: u64,
) -> Result<AcceptedBatch, SamplerError> {
    if cfg.batch_size < 1 {
        return Err(SamplerError::EmptyBatch);
    }
    if cfg.oversample_factor < 1 {
        return Err(SamplerError::BadOversample);
    }
    let num_tasks = z.len();
    let mut plan_rng = rngs::stream_for(master_seed, tags::BATCH_PLAN, step, 0, 0);

    let target_counts = desired_counts(z, cfg.batch_size, &mut plan_rng)?;
    let m = if cfg.aas_enabled {
        inflation_factors(stats, cfg.max_inflation)?
    } else {
        vec![1.0; num_tasks]
    };
    let z_hat = recalibrated_dist(z, &m);
    let oversample_total = cfg.oversample_factor * cfg.batch_size;
    // First round: guarantee the desired counts and allocate the oversampling
    // buffer by the inflated distribution, so full acceptance needs no
    // resampling and the buffer flows toward high-filter tasks.
    let mut first_counts = if cfg.enforce_ratios {
        target_counts.clone()
    } else {
        vec![0; num_tasks]
    };
    let buffer: usize = oversample_total - first_counts.iter().sum::<usize>();
    if buffer > 0 {
        let extra = desired_counts(&z_hat, buffer, &mut plan_rng)?;
        for (c, e) in first_counts.iter_mut().zip(extra) {
            *c += e;
        }
    }

    let mut generated_total = vec![0usize; num_tasks];
    let mut filtered_total = vec![0usize; num_tasks];
    let raw = generate_counts(source, &first_counts, 0)?;
    let (mut accepted, gen0, filt0) = zero_grad_filter(raw, cfg.filter, num_tasks);
    for k in 0..num_tasks {
        generated_total[k] += gen0[k];
        filtered_total[k] += filt0[k];
    }

    let count_per_task = |groups: &[(RolloutGroup, AdvantageSet)]| -> Vec<usize> {
        let mut c = vec![0usize; num_tasks];
        for (g, _) in groups {
            c[g.prompt.task_id] += 1;
        }
        c
    };

    let deficiency = |accepted: &[(RolloutGroup, AdvantageSet)]| -> Vec<usize> {
        let c = count_per_task(accepted);
        if cfg.enforce_ratios {
            target_counts
                .iter()
                .zip(&c)
                .map(|(&n, &have)| n.saturating_sub(have))
                .collect()
        } else {
            // No per-task targets: only the total batch size matters. Spread
            // the remaining need uniformly for the resampling distribution.
            let total: usize = c.iter().sum();
            let need = cfg.batch_size.saturating_sub(total);
            vec![need.div_ceil(num_tasks).min(need); num_tasks]
        }
    };

    let mut rounds_used = 0usize;
    let mut def = deficiency(&accepted);
    while def.iter().sum::<usize>() > 0 && rounds_used < cfg.max_resamples {
        rounds_used += 1;
        let weight: Vec<f64> = def.iter().zip(&m).map(|(&d, &m)| d as f64 * m).collect();
        let total: f64 = weight.iter().sum();
        let dist: Vec<f64> = weight.iter().map(|w| w / total).collect();
        let counts = desired_counts(&dist, oversample_total, &mut plan_rng)?;
        let raw = generate_counts(source, &counts, rounds_used as u64)?;
        let (kept, gen_r, filt_r) = zero_grad_filter(raw, cfg.filter, num_tasks);
        for k in 0..num_tasks {
            generated_total[k] += gen_r[k];
            filtered_total[k] += filt_r[k];
        }
        accepted.extend(kept);
        def = deficiency(&accepted);
    }

    // Trim and fill to exactly B.
    let mut final_groups: Vec<(RolloutGroup, AdvantageSet)>;
    let undersized;
    if accepted.len() <= cfg.batch_size {
        undersized = accepted.len() < cfg.batch_size;
        final_groups = accepted;
    } else {
        undersized = false;
        let mut fill_rng = rngs::stream_for(master_seed, tags::TRIM_FILL, step, 0, 0);
        if cfg.enforce_ratios {
            // Retain at most n_k per task in generation order, then fill the
            // remainder uniformly without replacement from the leftovers.
            let mut taken = vec![0usize; num_tasks];
            let mut retained = Vec::with_capacity(cfg.batch_size);
            let mut leftover = Vec::new();
            for item in accepted {
                let k = item.0.prompt.task_id;
                if taken[k] < target_counts[k] {
                    taken[k] += 1;
                    retained.push(item);
                } else {
                    leftover.push(item);
                }
            }
            while retained.len() < cfg.batch_size && !leftover.is_empty() {
                let idx = fill_rng.random_range(0..leftover.len());
                retained.push(leftover.swap_remove(idx));
            }
            final_groups = retained;
        } else {
            // DAPO-style: uniform subset of size B.
            let mut pool = accepted;
            let mut picked = Vec::with_capacity(cfg.batch_size);
            for _ in 0..cfg.batch_size {
                let idx = fill_rng.random_range(0..pool.len());
                picked.push(pool.swap_remove(idx));
            }
            final_groups = picked;
        }
    }
    debug_assert!(final_groups.len() <= cfg.batch_size);

    // Canonical order for the downstream update.
    final_groups.sort_by_key(|(g, _)| (g.prompt.task_id, g.prompt.prompt_id));

    update_filter_stats(stats, &generated_total, &filtered_total)?;

    let per_task_counts = count_per_task(&final_groups);
    Ok(AcceptedBatch {
        groups: final_groups,
        per_task_counts,
        resample_rounds_used: rounds_used,
        undersized,
        per_task_generated: generated_total,
        per_task_filtered: filtered_total,
        plan: BatchPlan {
            target_counts,
            inflated_dist: z_hat,
            oversample_total,
        },
    })
}
