//! End-to-end training loop with baselines.
//!
//! One step: construct a batch under the current task weights, ascend the
//! z-weighted clipped surrogate over minibatches, measure per-task
//! improvements on the same batch, then update the task weights. Baselines
//! reuse the same pipeline with sampling or reweighting pieces swapped out.

use serde::Serialize;
use thiserror::Error;

use crate::config::{ConfigError, Method, TrainConfig};
use crate::env::{make_task_suite, EnvError, PromptInstance, TaskSuite, REWARD_CORRECT};
use crate::grpo::{improvement, policy_update, task_losses, GrpoError};
use crate::metrics::{MetricsRecord, RunLog};
use crate::optim::AdamWState;
use crate::policy::PolicyParams;
use crate::reweight::{update_weights, TaskWeights};
use crate::rngs::{self, tags};
use crate::sampler::{
    desired_counts, rp_sample, update_filter_stats, AcceptedBatch, BatchPlan, FilterStats,
    GroupSource, PolicySource, SamplerConfig, SamplerError,
};

/// Floor added to the sec-approx advantage-magnitude signal.
const SEC_FLOOR: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Grpo(#[from] GrpoError),
}

/// Completed (or aborted) run: the step log plus final-state summary.
#[derive(Debug, Serialize)]
pub struct RunOutcome {
    pub log: RunLog,
    pub final_accuracy: Vec<f64>,
    pub final_z: Vec<f64>,
    pub final_rho: Vec<f64>,
    /// Error message when the run stopped early on a non-finite value; the
    /// log then covers only the completed steps.
    pub aborted: Option<String>,
}

impl RunOutcome {
    pub fn final_worst(&self) -> f64 {
        self.final_accuracy
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min)
    }

    pub fn final_average(&self) -> f64 {
        self.final_accuracy.iter().sum::<f64>() / self.final_accuracy.len() as f64
    }
}

/// Greedy-decoding accuracy per task over up to `prompts_per_task` prompts.
pub fn evaluate(params: &PolicyParams, suite: &TaskSuite, prompts_per_task: usize) -> Vec<f64> {
    suite
        .specs()
        .enumerate()
        .map(|(task_id, spec)| {
            let n = spec.num_prompts.min(prompts_per_task);
            let correct = (0..n)
                .filter(|&prompt_id| {
                    let prompt = PromptInstance { task_id, prompt_id };
                    let decoded = params.greedy_decode(prompt);
                    suite.evaluate_reward(prompt, &decoded).unwrap_or(0.0) == REWARD_CORRECT
                })
                .count();
            correct as f64 / n as f64
        })
        .collect()
}

/// Uniform-task batch with no zero-gradient filtering (plain GRPO).
/// Zero-gradient groups stay in the batch; they contribute no gradient.
/// Filter tallies are still tracked so rho telemetry stays meaningful.
fn uniform_unfiltered_batch(
    source: &PolicySource,
    cfg: &SamplerConfig,
    stats: &mut FilterStats,
    num_tasks: usize,
    master_seed: u64,
    step: u64,
) -> Result<AcceptedBatch, SamplerError> {
    let uniform = vec![1.0 / num_tasks as f64; num_tasks];
    let mut plan_rng = rngs::stream_for(master_seed, tags::BATCH_PLAN, step, 0, 0);
    let counts = desired_counts(&uniform, cfg.batch_size, &mut plan_rng)?;
    let mut groups = Vec::with_capacity(cfg.batch_size);
    for (task_id, &n) in counts.iter().enumerate() {
        for slot in 0..n as u64 {
            groups.push(source.generate(task_id, 0, slot)?);
        }
    }
    // Tally what the filter would have dropped, without dropping anything.
    let mut generated = vec![0usize; num_tasks];
    let mut would_filter = vec![0usize; num_tasks];
    for (group, adv) in &groups {
        let k = group.prompt.task_id;
        generated[k] += 1;
        if !cfg.filter.keeps(&group.rewards, adv) {
            would_filter[k] += 1;
        }
    }
    groups.sort_by_key(|(g, _)| (g.prompt.task_id, g.prompt.prompt_id));
    update_filter_stats(stats, &generated, &would_filter)?;
    let mut per_task_counts = vec![0usize; num_tasks];
    for (g, _) in &groups {
        per_task_counts[g.prompt.task_id] += 1;
    }
    Ok(AcceptedBatch {
        groups,
        per_task_counts,
        resample_rounds_used: 0,
        undersized: false,
        per_task_generated: generated,
        per_task_filtered: would_filter,
        plan: BatchPlan {
            target_counts: counts,
            inflated_dist: uniform,
            oversample_total: cfg.batch_size,
        },
    })
}

/// How the effective sampler config differs from the file config per method.
fn effective_sampler(cfg: &TrainConfig) -> SamplerConfig {
    let mut s = cfg.sampler.clone();
    match cfg.method {
        Method::DapoUniform | Method::SecApprox => {
            s.aas_enabled = false;
            s.enforce_ratios = false;
        }
        _ => {}
    }
    s
}

fn sec_weights(signal: &[f64]) -> Vec<f64> {
    let floored: Vec<f64> = signal.iter().map(|s| s.max(SEC_FLOOR)).collect();
    let total: f64 = floored.iter().sum();
    floored.into_iter().map(|s| s / total).collect()
}

pub fn run_training(cfg: &TrainConfig, seed: u64) -> Result<RunOutcome, TrainError> {
    cfg.validate()?;
    let suite = make_task_suite(&cfg.tasks)?;
    let num_tasks = suite.num_tasks();
    let sampler_cfg = effective_sampler(cfg);

    let mut init_rng = rngs::stream_for(seed, tags::INIT, 0, 0, 0);
    let mut params = PolicyParams::init(&suite, cfg.init_noise, &mut init_rng);
    let reference = params.snapshot();
    let mut opt_state = AdamWState::new(params.num_params());

    let mut weights = TaskWeights::uniform(num_tasks);
    let mut stats = FilterStats::new(num_tasks, sampler_cfg.ema_decay);
    // Batch-mean raw reward per task, carried forward when a task is absent.
    let mut last_rewards = vec![0.0; num_tasks];
    // Smoothed advantage-magnitude signal (sec-approx only).
    let mut sec_signal = vec![0.0; num_tasks];

    let mut log: RunLog = Vec::with_capacity(cfg.total_steps as usize);
    let mut accuracy = evaluate(&params, &suite, cfg.eval_prompts_per_task);
    let mut aborted = None;

    for step in 0..cfg.total_steps {
        let source = PolicySource {
            suite: &suite,
            current: &params,
            reference: &reference,
            clip: &cfg.clip,
            group_size: sampler_cfg.group_size,
            master_seed: seed,
            step,
        };
        let batch = match cfg.method {
            Method::GrpoUniform => {
                uniform_unfiltered_batch(&source, &sampler_cfg, &mut stats, num_tasks, seed, step)
            }
            Method::SecApprox => rp_sample(
                &source,
                &sec_weights(&sec_signal),
                &sampler_cfg,
                &mut stats,
                seed,
                step,
            ),
            _ => rp_sample(&source, &weights.z, &sampler_cfg, &mut stats, seed, step),
        };
        let batch = match batch {
            Ok(b) => b,
            Err(e) => {
                aborted = Some(e.to_string());
                break;
            }
        };

        let mut task_present = vec![false; num_tasks];
        let mut reward_sums = vec![0.0; num_tasks];
        let mut abs_adv_sums = vec![0.0; num_tasks];
        for (group, adv) in &batch.groups {
            let k = group.prompt.task_id;
            task_present[k] = true;
            reward_sums[k] += group.rewards.iter().sum::<f64>() / group.rewards.len() as f64;
            abs_adv_sums[k] +=
                adv.values.iter().map(|a| a.abs()).sum::<f64>() / adv.values.len() as f64;
        }
        for k in 0..num_tasks {
            if task_present[k] {
                let c = batch.per_task_counts[k] as f64;
                last_rewards[k] = reward_sums[k] / c;
                sec_signal[k] =
                    cfg.sec_decay * sec_signal[k] + (1.0 - cfg.sec_decay) * abs_adv_sums[k] / c;
            }
        }

        let step_result = (|| -> Result<Vec<crate::grpo::Improvement>, GrpoError> {
            if batch.groups.is_empty() {
                // Nothing survived; skip the update but keep the step.
                return Ok(vec![
                    crate::grpo::Improvement {
                        value: 0.0,
                        missing: true,
                    };
                    num_tasks
                ]);
            }
            let j_old = task_losses(&params, &batch.groups, &cfg.clip, num_tasks)?;
            policy_update(
                &mut params,
                &batch.groups,
                &cfg.clip,
                &cfg.optimizer,
                &mut opt_state,
                &weights.z,
                cfg.num_minibatch,
            )?;
            let j_new = task_losses(&params, &batch.groups, &cfg.clip, num_tasks)?;
            Ok(improvement(&j_new, &j_old, cfg.improvement_clip))
        })();
        let improvements = match step_result {
            Ok(i) => i,
            Err(e) => {
                aborted = Some(e.to_string());
                break;
            }
        };
        if params.flat().iter().any(|w| !w.is_finite()) {
            aborted = Some("non-finite policy parameters".to_string());
            break;
        }

        match cfg.method {
            Method::MtgrpoIwu | Method::MtgrpoRegularized | Method::MtgrpoStrict => {
                update_weights(&mut weights, &last_rewards, &improvements, &cfg.reweight);
            }
            // grpo/dapo hold z uniform; sec-approx tracks its own signal.
            _ => {}
        }

        let evaluated = step % cfg.eval_every == 0 || step + 1 == cfg.total_steps;
        if evaluated {
            accuracy = evaluate(&params, &suite, cfg.eval_prompts_per_task);
        }
        let batch_total: usize = batch.per_task_counts.iter().sum();
        let realized: Vec<f64> = batch
            .per_task_counts
            .iter()
            .map(|&c| {
                if batch_total > 0 {
                    c as f64 / batch_total as f64
                } else {
                    0.0
                }
            })
            .collect();
        let z_record = match cfg.method {
            Method::SecApprox => sec_weights(&sec_signal),
            _ => weights.z.clone(),
        };
        log.push(MetricsRecord {
            step,
            per_task_accuracy: accuracy.clone(),
            worst_task_accuracy: accuracy.iter().cloned().fold(f64::INFINITY, f64::min),
            average_accuracy: accuracy.iter().sum::<f64>() / num_tasks as f64,
            evaluated,
            z: z_record,
            batch_rewards: last_rewards.clone(),
            task_present,
            improvements: improvements.iter().map(|i| i.value).collect(),
            rho: stats.rho.clone(),
            resample_rounds: batch.resample_rounds_used,
            realized_proportions: realized,
            batch_size: batch_total,
            undersized: batch.undersized,
        });
    }

    Ok(RunOutcome {
        final_accuracy: accuracy,
        final_z: weights.z.clone(),
        final_rho: stats.rho.clone(),
        log,
        aborted,
    })
}
