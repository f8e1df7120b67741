//! Testbed for the marginal and joint predictive distributions of
//! uncertainty-aware classifiers.
//!
//! The crate is organised bottom-up:
//!
//! - [`nncore`]: a small feed-forward network with analytic gradients and Adam.
//! - [`generative`]: sampled MLP environments and the biased-coin reference process.
//! - [`likelihood`]: Monte Carlo and random-partitioning estimators of the
//!   likelihood an agent's belief assigns to a block of test labels.
//! - [`agents`]: benchmark agents behind the [`agents::PosteriorSampler`] interface.
//! - [`evaluator`]: the KL-loss loop over sampled problems, sweeps, and real-data NLL.
//! - [`cli`]: run configuration, record files, leaderboards and correlation reports.

pub mod agents;
pub mod cli;
pub mod data;
pub mod error;
pub mod evaluator;
pub mod generative;
pub mod likelihood;
pub mod nncore;
pub mod seeding;

pub use data::Dataset;
pub use error::{Error, Result};
