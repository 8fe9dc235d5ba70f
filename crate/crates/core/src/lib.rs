//! Confidence calibration through a clipped logarithmic scoring-rule reward.
//!
//! The crate is organised bottom-up:
//!
//! - [`reward`]: the clipped, normalized log-score reward and its expectation.
//! - [`judge`]: exact-match and F1 word-overlap correctness checks.
//! - [`env`]: a synthetic question-answering world exposing confidence emission as an MDP.
//! - [`policy`]: a tabular softmax policy, rollouts and the per-bucket baseline.
//! - [`ppo`]: the clipped-surrogate update with Adam.
//! - [`train`]: the training loop, checkpoints and held-out evaluation.
//! - [`metrics`]: ECE, AUROC, reliability bins, histograms and bootstrap intervals.
//! - [`response`]: the `Answer: <answer>, Confidence: <confidence>` grammar.
//! - [`report`], [`eval`], [`config`]: run configuration, log evaluation and report files.
//! - [`rng`]: seeded substreams, one per episode or resample.
//!
//! Rollout collection, bootstrap resampling and per-row evaluation are
//! data-parallel. They go through [`exec`], which uses rayon when the
//! `parallel` feature is enabled and runs sequentially otherwise. Results do
//! not depend on the execution mode.

pub mod config;
pub mod env;
pub mod eval;
pub mod exec;
pub mod judge;
pub mod metrics;
pub mod policy;
pub mod ppo;
pub mod report;
pub mod response;
pub mod reward;
pub mod rng;
pub mod train;

pub use exec::Execution;
