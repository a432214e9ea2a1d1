//! Reinforcement fine-tuning lab for group-relative policy optimization with a
//! dynamic KL schedule (GRPO-D).
//!
//! The crate is organised bottom-up:
//!
//! - [`tasks`]: synthetic verifiable task families, the shared vocabulary, and
//!   gold demonstrations.
//! - [`reward`]: verifiable accuracy and format rewards and their weighted sum.
//! - [`grpo`]: the objective's math (advantages, KL schedule, clipped
//!   surrogate, k3 KL estimator) over plain log-probabilities.
//! - [`policy`]: a small causal transformer with exact reverse-mode gradients,
//!   sampling, Adam, and checkpoints.
//! - [`trainer`]: GRPO / GRPO-D / SFT training loops and evaluation.
//! - [`harness`]: configuration, experiment presets, and the command line.

pub mod error;
pub mod grpo;
pub mod harness;
pub mod policy;
pub mod reward;
pub mod rng;
pub mod tasks;
pub mod trainer;

pub use error::{LabError, Result};
