//! Synthetic verifiable task families.
//!
//! Each task is a set of prompts with exactly one correct answer sequence per
//! prompt, drawn deterministically from the task's difficulty seed. Rewards
//! are tiered: 1.0 for the correct answer, 0.1 for a wrong answer that is
//! still "correctly formatted", 0.0 otherwise. Difficulty is controlled by
//! the answer alphabet size and answer length; the zero-gradient propensity
//! of a task is controlled by the valid-format fraction and the policy
//! initialization, not by the reward function itself.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rngs::{self, tags};

pub const REWARD_CORRECT: f64 = 1.0;
pub const REWARD_FORMAT: f64 = 0.1;
pub const REWARD_INVALID: f64 = 0.0;

/// Enumeration cap for exact-tier diagnostics.
pub const ENUM_LIMIT: usize = 4096;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("task suite needs at least one task spec")]
    EmptySuite,
    #[error("task {task_id}: vocab_size must be >= 2, got {vocab_size}")]
    VocabTooSmall { task_id: usize, vocab_size: usize },
    #[error("task {task_id}: answer_len must be >= 1, got {answer_len}")]
    AnswerLenTooSmall { task_id: usize, answer_len: usize },
    #[error("task {task_id}: num_prompts must be >= 1")]
    NoPrompts { task_id: usize },
    #[error("task {task_id}: valid_format_fraction must lie in (0, 1], got {fraction}")]
    BadFormatFraction { task_id: usize, fraction: f64 },
    #[error("answer length {got} does not match task answer_len {expected}")]
    AnswerLengthMismatch { expected: usize, got: usize },
    #[error("unknown task id {0}")]
    UnknownTask(usize),
    #[error("unknown prompt id {prompt_id} for task {task_id}")]
    UnknownPrompt { task_id: usize, prompt_id: usize },
    #[error("enumeration bound exceeded: V^L = {space} > {limit}")]
    EnumerationBound { space: usize, limit: usize },
    #[error("group size must be >= 2, got {0}")]
    GroupTooSmall(usize),
}

/// Declarative description of one synthetic task family.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub task_id: usize,
    pub num_prompts: usize,
    pub answer_len: usize,
    pub vocab_size: usize,
    pub valid_format_fraction: f64,
    pub difficulty_seed: u64,
}

/// One concrete question instance: `(task, prompt)` with a one-hot context.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PromptInstance {
    pub task_id: usize,
    pub prompt_id: usize,
}

impl PromptInstance {
    /// One-hot feature vector of length `num_prompts`.
    pub fn feature(&self, num_prompts: usize) -> Vec<f64> {
        let mut f = vec![0.0; num_prompts];
        f[self.prompt_id] = 1.0;
        f
    }
}

#[derive(Debug, Clone)]
struct TaskTable {
    spec: TaskSpec,
    /// Base-V index of the correct answer for each prompt.
    correct: Vec<usize>,
    /// Number of lexicographically-first sequences deemed correctly formatted.
    format_cutoff: usize,
    answer_space: usize,
}

/// Immutable collection of tasks; safe to share across threads.
#[derive(Debug, Clone)]
pub struct TaskSuite {
    tasks: Vec<TaskTable>,
}

/// Encode a token sequence as its base-V lexicographic index.
pub fn sequence_index(answer: &[usize], vocab_size: usize) -> usize {
    answer.iter().fold(0, |acc, &t| acc * vocab_size + t)
}

/// Decode a base-V index back to a token sequence of length `len`.
pub fn index_sequence(mut idx: usize, vocab_size: usize, len: usize) -> Vec<usize> {
    let mut out = vec![0; len];
    for slot in out.iter_mut().rev() {
        *slot = idx % vocab_size;
        idx /= vocab_size;
    }
    out
}

pub fn make_task_suite(specs: &[TaskSpec]) -> Result<TaskSuite, EnvError> {
    if specs.is_empty() {
        return Err(EnvError::EmptySuite);
    }
    let mut tasks = Vec::with_capacity(specs.len());
    for spec in specs {
        if spec.vocab_size < 2 {
            return Err(EnvError::VocabTooSmall {
                task_id: spec.task_id,
                vocab_size: spec.vocab_size,
            });
        }
        if spec.answer_len < 1 {
            return Err(EnvError::AnswerLenTooSmall {
                task_id: spec.task_id,
                answer_len: spec.answer_len,
            });
        }
        if spec.num_prompts < 1 {
            return Err(EnvError::NoPrompts {
                task_id: spec.task_id,
            });
        }
        if !(spec.valid_format_fraction > 0.0 && spec.valid_format_fraction <= 1.0) {
            return Err(EnvError::BadFormatFraction {
                task_id: spec.task_id,
                fraction: spec.valid_format_fraction,
            });
        }
        let answer_space = spec
            .vocab_size
            .checked_pow(spec.answer_len as u32)
            .expect("answer space overflow");
        let format_cutoff =
            ((spec.valid_format_fraction * answer_space as f64).ceil() as usize).clamp(1, answer_space);
        let mut rng = rngs::stream_for(spec.difficulty_seed, tags::SUITE, spec.task_id as u64, 0, 0);
        let correct = (0..spec.num_prompts)
            .map(|_| rng.random_range(0..answer_space))
            .collect();
        tasks.push(TaskTable {
            spec: spec.clone(),
            correct,
            format_cutoff,
            answer_space,
        });
    }
    Ok(TaskSuite { tasks })
}

impl TaskSuite {
    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn spec(&self, task_id: usize) -> Result<&TaskSpec, EnvError> {
        self.tasks
            .get(task_id)
            .map(|t| &t.spec)
            .ok_or(EnvError::UnknownTask(task_id))
    }

    pub fn specs(&self) -> impl Iterator<Item = &TaskSpec> {
        self.tasks.iter().map(|t| &t.spec)
    }

    /// Correct answer sequence for a prompt.
    pub fn correct_answer(&self, prompt: PromptInstance) -> Result<Vec<usize>, EnvError> {
        let task = self
            .tasks
            .get(prompt.task_id)
            .ok_or(EnvError::UnknownTask(prompt.task_id))?;
        let idx = *task
            .correct
            .get(prompt.prompt_id)
            .ok_or(EnvError::UnknownPrompt {
                task_id: prompt.task_id,
                prompt_id: prompt.prompt_id,
            })?;
        Ok(index_sequence(idx, task.spec.vocab_size, task.spec.answer_len))
    }

    /// Reward tier membership for an answer given its task's format rule.
    ///
    /// The valid-format set is the lexicographically first `format_cutoff`
    /// sequences, with the correct answer swapped in for the last slot when
    /// it would otherwise be absent.
    fn tier(&self, prompt: PromptInstance, answer_idx: usize) -> Result<f64, EnvError> {
        let task = self
            .tasks
            .get(prompt.task_id)
            .ok_or(EnvError::UnknownTask(prompt.task_id))?;
        let correct_idx = *task
            .correct
            .get(prompt.prompt_id)
            .ok_or(EnvError::UnknownPrompt {
                task_id: prompt.task_id,
                prompt_id: prompt.prompt_id,
            })?;
        if answer_idx == correct_idx {
            return Ok(REWARD_CORRECT);
        }
        let cutoff = task.format_cutoff;
        let valid = if correct_idx < cutoff {
            answer_idx < cutoff
        } else {
            answer_idx < cutoff - 1
        };
        Ok(if valid { REWARD_FORMAT } else { REWARD_INVALID })
    }

    pub fn evaluate_reward(
        &self,
        prompt: PromptInstance,
        answer: &[usize],
    ) -> Result<f64, EnvError> {
        let spec = self.spec(prompt.task_id)?;
        if answer.len() != spec.answer_len {
            return Err(EnvError::AnswerLengthMismatch {
                expected: spec.answer_len,
                got: answer.len(),
            });
        }
        self.tier(prompt, sequence_index(answer, spec.vocab_size))
    }

    fn answer_space(&self, task_id: usize) -> Result<usize, EnvError> {
        self.tasks
            .get(task_id)
            .map(|t| t.answer_space)
            .ok_or(EnvError::UnknownTask(task_id))
    }
}

/// Exact per-sequence probability source, implemented by the policy.
pub trait SequenceDist {
    /// Probability of generating `answer` for `prompt`.
    fn sequence_prob(&self, prompt: PromptInstance, answer: &[usize]) -> f64;
}

/// Exact probability that all G i.i.d. rollouts for a prompt of this task
/// land in the same reward tier, averaged over the task's prompts.
pub fn zero_grad_probability<P: SequenceDist>(
    suite: &TaskSuite,
    policy: &P,
    task_id: usize,
    group_size: usize,
) -> Result<f64, EnvError> {
    if group_size < 2 {
        return Err(EnvError::GroupTooSmall(group_size));
    }
    let spec = suite.spec(task_id)?.clone();
    let space = suite.answer_space(task_id)?;
    if space > ENUM_LIMIT {
        return Err(EnvError::EnumerationBound {
            space,
            limit: ENUM_LIMIT,
        });
    }
    let mut total = 0.0;
    for prompt_id in 0..spec.num_prompts {
        let prompt = PromptInstance { task_id, prompt_id };
        let mut tier_mass = [0.0f64; 3];
        for idx in 0..space {
            let answer = index_sequence(idx, spec.vocab_size, spec.answer_len);
            let p = policy.sequence_prob(prompt, &answer);
            let reward = suite.tier(prompt, idx)?;
            let slot = if reward == REWARD_CORRECT {
                0
            } else if reward == REWARD_FORMAT {
                1
            } else {
                2
            };
            tier_mass[slot] += p;
        }
        total += tier_mass.iter().map(|m| m.powi(group_size as i32)).sum::<f64>();
    }
    Ok(total / spec.num_prompts as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(task_id: usize, num_prompts: usize, answer_len: usize, vocab: usize) -> TaskSpec {
        TaskSpec {
            task_id,
            num_prompts,
            answer_len,
            vocab_size: vocab,
            valid_format_fraction: 0.5,
            difficulty_seed: 11,
        }
    }

    #[test]
    fn suite_rebuild_is_identical() {
        let specs = vec![spec(0, 10, 1, 4)];
        let a = make_task_suite(&specs).unwrap();
        let b = make_task_suite(&specs).unwrap();
        for p in 0..10 {
            let prompt = PromptInstance {
                task_id: 0,
                prompt_id: p,
            };
            let ans = a.correct_answer(prompt).unwrap();
            assert_eq!(ans, b.correct_answer(prompt).unwrap());
            assert_eq!(ans.len(), 1);
            assert!(ans[0] < 4);
        }
    }

    #[test]
    fn suite_counts_tasks() {
        let specs = vec![spec(0, 2, 1, 2), spec(1, 2, 1, 2), spec(2, 2, 1, 2)];
        assert_eq!(make_task_suite(&specs).unwrap().num_tasks(), 3);
    }

    #[test]
    fn rejects_invalid_specs() {
        assert!(matches!(make_task_suite(&[]), Err(EnvError::EmptySuite)));
        let mut bad = spec(0, 2, 1, 1);
        assert!(make_task_suite(std::slice::from_ref(&bad)).is_err());
        bad = spec(0, 2, 0, 4);
        assert!(make_task_suite(std::slice::from_ref(&bad)).is_err());
    }

    #[test]
    fn reward_tiers() {
        // V=4, L=1, fraction 0.5 -> format cutoff 2.
        let suite = make_task_suite(&[spec(0, 8, 1, 4)]).unwrap();
        for prompt_id in 0..8 {
            let prompt = PromptInstance {
                task_id: 0,
                prompt_id,
            };
            let correct = suite.correct_answer(prompt).unwrap();
            assert_eq!(suite.evaluate_reward(prompt, &correct).unwrap(), 1.0);
            let mut seen = [0usize; 3];
            for tok in 0..4 {
                let r = suite.evaluate_reward(prompt, &[tok]).unwrap();
                let slot = if r == 1.0 {
                    0
                } else if r == 0.1 {
                    1
                } else {
                    2
                };
                seen[slot] += 1;
            }
            // Exactly one correct, one formatted-wrong, two invalid.
            assert_eq!(seen, [1, 1, 2]);
        }
    }

    #[test]
    fn reward_rejects_length_mismatch() {
        let suite = make_task_suite(&[spec(0, 2, 2, 3)]).unwrap();
        let prompt = PromptInstance {
            task_id: 0,
            prompt_id: 0,
        };
        assert!(matches!(
            suite.evaluate_reward(prompt, &[0]),
            Err(EnvError::AnswerLengthMismatch { .. })
        ));
    }

    #[test]
    fn correct_answer_always_valid_format() {
        // Small fraction so the cutoff is 1; correct must still reward 1.0
        // and the swap rule must keep the tier masses consistent.
        let suite = make_task_suite(&[TaskSpec {
            task_id: 0,
            num_prompts: 16,
            answer_len: 2,
            vocab_size: 4,
            valid_format_fraction: 0.1,
            difficulty_seed: 3,
        }])
        .unwrap();
        for prompt_id in 0..16 {
            let prompt = PromptInstance {
                task_id: 0,
                prompt_id,
            };
            let correct = suite.correct_answer(prompt).unwrap();
            assert_eq!(suite.evaluate_reward(prompt, &correct).unwrap(), 1.0);
        }
    }

    struct Uniform {
        space: usize,
    }
    impl SequenceDist for Uniform {
        fn sequence_prob(&self, _prompt: PromptInstance, _answer: &[usize]) -> f64 {
            1.0 / self.space as f64
        }
    }

    struct Tiered;
    impl SequenceDist for Tiered {
        // V=2, L=1: token 0 carries 0.9, token 1 carries 0.1.
        fn sequence_prob(&self, _prompt: PromptInstance, answer: &[usize]) -> f64 {
            if answer[0] == 0 {
                0.9
            } else {
                0.1
            }
        }
    }

    #[test]
    fn zero_grad_probability_uniform_two_tiers() {
        // V=2, L=1, fraction 1.0: tiers are {correct, format}, each mass 0.5
        // under the uniform policy, so p = 0.5^2 + 0.5^2 = 0.5.
        let suite = make_task_suite(&[TaskSpec {
            task_id: 0,
            num_prompts: 4,
            answer_len: 1,
            vocab_size: 2,
            valid_format_fraction: 1.0,
            difficulty_seed: 5,
        }])
        .unwrap();
        let p = zero_grad_probability(&suite, &Uniform { space: 2 }, 0, 2).unwrap();
        assert!((p - 0.5).abs() < 1e-12);
    }

    #[test]
    fn zero_grad_probability_deterministic_policy() {
        struct Point;
        impl SequenceDist for Point {
            fn sequence_prob(&self, _p: PromptInstance, answer: &[usize]) -> f64 {
                if answer[0] == 1 {
                    1.0
                } else {
                    0.0
                }
            }
        }
        let suite = make_task_suite(&[TaskSpec {
            task_id: 0,
            num_prompts: 3,
            answer_len: 1,
            vocab_size: 2,
            valid_format_fraction: 1.0,
            difficulty_seed: 5,
        }])
        .unwrap();
        let p = zero_grad_probability(&suite, &Point, 0, 4).unwrap();
        assert!((p - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_grad_probability_tier_masses() {
        // Tier masses (0.9, 0.1) with G=2: 0.81 + 0.01 = 0.82. Build a
        // one-prompt suite where the correct answer is token 0 or token 1;
        // either way the two tiers split the mass as (0.9, 0.1) or (0.1, 0.9)
        // and the sum of squares is the same.
        let suite = make_task_suite(&[TaskSpec {
            task_id: 0,
            num_prompts: 1,
            answer_len: 1,
            vocab_size: 2,
            valid_format_fraction: 1.0,
            difficulty_seed: 5,
        }])
        .unwrap();
        let p = zero_grad_probability(&suite, &Tiered, 0, 2).unwrap();
        assert!((p - 0.82).abs() < 1e-12);
    }

    #[test]
    fn zero_grad_probability_enforces_bounds() {
        let suite = make_task_suite(&[TaskSpec {
            task_id: 0,
            num_prompts: 1,
            answer_len: 7,
            vocab_size: 4,
            valid_format_fraction: 1.0,
            difficulty_seed: 5,
        }])
        .unwrap();
        assert!(matches!(
            zero_grad_probability(&suite, &Uniform { space: 1 << 14 }, 0, 2),
            Err(EnvError::EnumerationBound { .. })
        ));
        let small = make_task_suite(&[spec(0, 1, 1, 2)]).unwrap();
        assert!(matches!(
            zero_grad_probability(&small, &Uniform { space: 2 }, 0, 1),
            Err(EnvError::GroupTooSmall(1))
        ));
    }
}
