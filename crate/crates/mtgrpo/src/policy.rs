//! Tabular linear-softmax policy.
//!
//! Each (task, prompt, position) owns a row of `vocab_size` logits; answers
//! are decoded position-by-position at temperature 1.0. The one-hot prompt
//! features make the policy exactly a per-prompt table, so log-probabilities,
//! sampling distributions, and gradients are all available in closed form.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::env::{EnvError, PromptInstance, SequenceDist, TaskSuite};

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("group size must be >= 2, got {0}")]
    GroupTooSmall(usize),
    #[error(transparent)]
    Env(#[from] EnvError),
}

#[derive(Debug, Clone, PartialEq)]
struct TaskParams {
    num_prompts: usize,
    answer_len: usize,
    vocab_size: usize,
    /// Logits laid out as [prompt][position][token].
    weights: Vec<f64>,
}

impl TaskParams {
    fn row_start(&self, prompt_id: usize, pos: usize) -> usize {
        (prompt_id * self.answer_len + pos) * self.vocab_size
    }
}

/// All trainable parameters, plus a monotone version counter.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    tasks: Vec<TaskParams>,
    pub version: u64,
}

/// Numerically stable log-softmax of one logit row.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_z = logits.iter().map(|&x| (x - max).exp()).sum::<f64>().ln() + max;
    logits.iter().map(|&x| x - log_z).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    log_softmax(logits).iter().map(|&lp| lp.exp()).collect()
}

impl PolicyParams {
    /// Fresh parameters for a suite: zero logits (uniform per position),
    /// optionally perturbed by Gaussian noise of the given scale.
    pub fn init(suite: &TaskSuite, init_noise: f64, rng: &mut ChaCha8Rng) -> Self {
        let tasks = suite
            .specs()
            .map(|spec| {
                let n = spec.num_prompts * spec.answer_len * spec.vocab_size;
                let weights = if init_noise == 0.0 {
                    vec![0.0; n]
                } else {
                    (0..n)
                        .map(|_| {
                            // Box-Muller; two uniforms per draw keeps the stream simple.
                            let u1: f64 = rng.random::<f64>().max(1e-12);
                            let u2: f64 = rng.random();
                            init_noise
                                * (-2.0 * u1.ln()).sqrt()
                                * (2.0 * std::f64::consts::PI * u2).cos()
                        })
                        .collect()
                };
                TaskParams {
                    num_prompts: spec.num_prompts,
                    answer_len: spec.answer_len,
                    vocab_size: spec.vocab_size,
                    weights,
                }
            })
            .collect();
        PolicyParams { tasks, version: 0 }
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn num_params(&self) -> usize {
        self.tasks.iter().map(|t| t.weights.len()).sum()
    }

    /// Logit row for one decoding position.
    pub fn logits(&self, prompt: PromptInstance, pos: usize) -> &[f64] {
        let task = &self.tasks[prompt.task_id];
        let s = task.row_start(prompt.prompt_id, pos);
        &task.weights[s..s + task.vocab_size]
    }

    pub fn set_logits(&mut self, prompt: PromptInstance, pos: usize, values: &[f64]) {
        let task = &mut self.tasks[prompt.task_id];
        let s = task.row_start(prompt.prompt_id, pos);
        task.weights[s..s + task.vocab_size].copy_from_slice(values);
    }

    /// Exact per-token log-probabilities of `answer` under these parameters.
    pub fn logprob(&self, prompt: PromptInstance, answer: &[usize]) -> Vec<f64> {
        let task = &self.tasks[prompt.task_id];
        debug_assert_eq!(answer.len(), task.answer_len);
        answer
            .iter()
            .enumerate()
            .map(|(pos, &tok)| log_softmax(self.logits(prompt, pos))[tok])
            .collect()
    }

    /// Gradient of the summed log-probability of `answer`, scaled by `scale`
    /// and accumulated into `grad` (same layout as the parameters).
    pub fn accumulate_logprob_grad(
        &self,
        prompt: PromptInstance,
        answer: &[usize],
        scale: f64,
        grad: &mut GradBuffer,
    ) {
        let task = &self.tasks[prompt.task_id];
        for (pos, &tok) in answer.iter().enumerate() {
            let probs = softmax(self.logits(prompt, pos));
            let s = task.row_start(prompt.prompt_id, pos);
            let row = &mut grad.tasks[prompt.task_id][s..s + task.vocab_size];
            for (g, &p) in row.iter_mut().zip(&probs) {
                *g -= scale * p;
            }
            row[tok] += scale;
        }
    }

    /// Per-position log-prob gradient as a standalone buffer.
    pub fn grad_logprob(&self, prompt: PromptInstance, answer: &[usize]) -> GradBuffer {
        let mut grad = GradBuffer::zeros_like(self);
        self.accumulate_logprob_grad(prompt, answer, 1.0, &mut grad);
        grad
    }

    /// Token-level per-position gradient for one (position, token) pair,
    /// scaled and accumulated. Used by the surrogate, where each token of a
    /// rollout carries its own coefficient.
    pub fn accumulate_token_grad(
        &self,
        prompt: PromptInstance,
        pos: usize,
        tok: usize,
        scale: f64,
        grad: &mut GradBuffer,
    ) {
        let task = &self.tasks[prompt.task_id];
        let probs = softmax(self.logits(prompt, pos));
        let s = task.row_start(prompt.prompt_id, pos);
        let row = &mut grad.tasks[prompt.task_id][s..s + task.vocab_size];
        for (g, &p) in row.iter_mut().zip(&probs) {
            *g -= scale * p;
        }
        row[tok] += scale;
    }

    /// Deep frozen copy; version preserved.
    pub fn snapshot(&self) -> PolicyParams {
        self.clone()
    }

    /// Greedy (argmax) decode; ties break toward the lowest token index.
    pub fn greedy_decode(&self, prompt: PromptInstance) -> Vec<usize> {
        let task = &self.tasks[prompt.task_id];
        (0..task.answer_len)
            .map(|pos| {
                let logits = self.logits(prompt, pos);
                let mut best = 0;
                for (i, &x) in logits.iter().enumerate() {
                    if x > logits[best] {
                        best = i;
                    }
                }
                best
            })
            .collect()
    }

    /// In-place SGD-style step along `direction` (used by the optimizer).
    pub fn apply_flat<F: FnMut(usize, &mut f64)>(&mut self, mut f: F) {
        let mut offset = 0;
        for task in &mut self.tasks {
            for w in &mut task.weights {
                f(offset, w);
                offset += 1;
            }
        }
        self.version += 1;
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for task in &self.tasks {
            out.extend_from_slice(&task.weights);
        }
        out
    }
}

impl SequenceDist for PolicyParams {
    fn sequence_prob(&self, prompt: PromptInstance, answer: &[usize]) -> f64 {
        self.logprob(prompt, answer).iter().sum::<f64>().exp()
    }
}

/// Gradient accumulator with the same layout as [`PolicyParams`].
#[derive(Debug, Clone)]
pub struct GradBuffer {
    tasks: Vec<Vec<f64>>,
}

impl GradBuffer {
    pub fn zeros_like(params: &PolicyParams) -> Self {
        GradBuffer {
            tasks: params.tasks.iter().map(|t| vec![0.0; t.weights.len()]).collect(),
        }
    }

    pub fn add_scaled(&mut self, other: &GradBuffer, scale: f64) {
        for (a, b) in self.tasks.iter_mut().zip(&other.tasks) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in &mut self.tasks {
            for x in t.iter_mut() {
                *x *= factor;
            }
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for t in &self.tasks {
            out.extend_from_slice(t);
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.tasks.iter().all(|t| t.iter().all(|x| x.is_finite()))
    }

    pub fn max_abs(&self) -> f64 {
        self.tasks
            .iter()
            .flat_map(|t| t.iter())
            .fold(0.0f64, |m, &x| m.max(x.abs()))
    }

    /// Row slice for inspection in tests.
    pub fn row(&self, params: &PolicyParams, prompt: PromptInstance, pos: usize) -> Vec<f64> {
        let task = &params.tasks[prompt.task_id];
        let s = task.row_start(prompt.prompt_id, pos);
        self.tasks[prompt.task_id][s..s + task.vocab_size].to_vec()
    }
}

/// G sampled answers for one prompt, with log-probs under the current, old,
/// and reference parameters and the verified scalar rewards.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGroup {
    pub prompt: PromptInstance,
    pub answers: Vec<Vec<usize>>,
    pub rewards: Vec<f64>,
    pub logp_cur: Vec<Vec<f64>>,
    pub logp_old: Vec<Vec<f64>>,
    pub logp_ref: Vec<Vec<f64>>,
}

impl RolloutGroup {
    pub fn group_size(&self) -> usize {
        self.answers.len()
    }
}

/// Sample a group of G i.i.d. answers for `prompt` from `current`.
///
/// At sampling time the behavior policy is the current policy, so
/// `logp_old == logp_cur`; `logp_cur` is refreshed by the trainer between
/// minibatch sub-updates.
pub fn sample_rollouts(
    current: &PolicyParams,
    reference: &PolicyParams,
    suite: &TaskSuite,
    prompt: PromptInstance,
    group_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<RolloutGroup, PolicyError> {
    if group_size < 2 {
        return Err(PolicyError::GroupTooSmall(group_size));
    }
    let spec = suite.spec(prompt.task_id)?;
    let mut answers = Vec::with_capacity(group_size);
    let mut rewards = Vec::with_capacity(group_size);
    for _ in 0..group_size {
        let mut answer = Vec::with_capacity(spec.answer_len);
        for pos in 0..spec.answer_len {
            let probs = softmax(current.logits(prompt, pos));
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut tok = probs.len() - 1;
            for (i, &p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    tok = i;
                    break;
                }
            }
            answer.push(tok);
        }
        rewards.push(suite.evaluate_reward(prompt, &answer)?);
        answers.push(answer);
    }
    let logp_cur: Vec<Vec<f64>> = answers.iter().map(|a| current.logprob(prompt, a)).collect();
    let logp_ref = answers.iter().map(|a| reference.logprob(prompt, a)).collect();
    Ok(RolloutGroup {
        prompt,
        answers,
        rewards,
        logp_old: logp_cur.clone(),
        logp_cur,
        logp_ref,
    })
}

/// Refresh `logp_cur` from the (possibly updated) current parameters.
pub fn refresh_current_logps(group: &mut RolloutGroup, current: &PolicyParams) {
    group.logp_cur = group
        .answers
        .iter()
        .map(|a| current.logprob(group.prompt, a))
        .collect();
}
