//! Low-rank reinforcement learning for continuous state/action MDPs with a
//! generative model.
//!
//! Each iteration discretizes the spaces, explores a small set of
//! state-action pairs with one-step lookahead, completes the Q-table with a
//! matrix estimator, and generalizes with 1-nearest-neighbour interpolation.

pub mod discretize;
pub mod engine;
pub mod envs;
pub mod error;
pub mod linalg;
pub mod me;
pub mod oracle;
pub mod rng;

pub use error::{Error, Result};
