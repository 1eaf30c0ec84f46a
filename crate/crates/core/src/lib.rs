//! Outcome-only reinforcement learning for probabilistic forecasting.
//!
//! A small categorical policy emits a structured response (content tokens
//! followed by a probability token) for each binary question. Rewards are
//! Brier-based with guard-rail penalties, and the policy is updated strictly
//! online with GRPO, Modified GRPO, ReMax, or offline with DPO. The
//! evaluation stack covers soft-Brier, equal-mass ECE, paired statistics and
//! a one-share trading simulator against market prices.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod algorithms;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod policy;
pub mod reward;
pub mod rng;
pub mod trading;
pub mod trainer;

pub use error::{Error, Result};
