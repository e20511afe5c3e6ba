//! Desk-scale laboratory for preference-based constrained reinforcement learning.
//!
//! The crate trains a per-step cost model from pairwise trajectory preferences
//! and per-trajectory safety bits, using a dead-zone Bradley-Terry objective
//! with a variance (SNR) regularizer, then optimizes a policy against the
//! learned cost with PPO-Lagrangian. Module map:
//!
//! - [`nn`]: small dense networks with exact reverse-mode gradients and Adam.
//! - [`env`]: hazard-chain and planar point environments, rollouts, and a
//!   tabular oracle (backward DP, trajectory enumeration).
//! - [`pref`]: preference records, oracle labeling, label noise, query budget.
//! - [`constraint`]: the composite cost-inference loss, offline pretraining,
//!   online finetuning, and dead-zone calibration.
//! - [`policy`]: PPO-Lagrangian agent and the end-to-end training runner.
//! - [`theory`]: executable checks of the gradient-dominance and dynamics
//!   claims behind the dead-zone term, plus the SNR covariance bound.
//! - [`metrics`]: sliced-Wasserstein-free 1-D W2 on quantile grids, bias and
//!   tail statistics, ablation aggregation.
//! - [`config`] / [`report`]: validated experiment configuration and run
//!   artifacts (per-iteration CSV, JSON summaries).
//!
//! Everything is `f64`, seeded via [`util::split_seed`], and deterministic for
//! a fixed seed on a fixed target.

pub mod config;
pub mod constraint;
pub mod env;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod policy;
pub mod pref;
pub mod report;
pub mod stats;
pub mod theory;
pub mod util;

pub use error::{Error, Result};
