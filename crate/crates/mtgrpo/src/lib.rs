//! Desk-scale multi-task GRPO optimization laboratory.
//!
//! Synthetic verifiable tasks with tiny tabular softmax policies make every
//! piece of the training stack exactly computable: group-relative advantages
//! and the clipped surrogate, task-weight dynamics on the simplex, the
//! ratio-preserving batch sampler, and the uniformity regularizer with its
//! min-flow oracle. The `harness` module ties these into a training loop
//! with baselines, metrics, and a CLI.

pub mod config;
pub mod env;
pub mod grpo;
pub mod metrics;
pub mod optim;
pub mod policy;
pub mod reweight;
pub mod rngs;
pub mod robust;
pub mod sampler;
pub mod train;
