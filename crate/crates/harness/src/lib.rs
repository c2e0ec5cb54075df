//! Experiment orchestration for `lowrank-rl`: configuration, the experiment
//! drivers behind the CLI, CSV output and plots.

pub mod config;
pub mod experiments;
pub mod output;
pub mod plot;

use std::fmt;

pub use config::{ConfigErrors, ExperimentConfig};

/// Harness failures, split by the exit code they map to.
#[derive(Debug)]
pub enum HarnessError {
    Config(String),
    Runtime(String),
}

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 1,
            HarnessError::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for HarnessError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HarnessError::Config(m) => write!(f, "configuration error: {m}"),
            HarnessError::Runtime(m) => write!(f, "runtime error: {m}"),
        }
    }
}

impl std::error::Error for HarnessError {}

impl From<ConfigErrors> for HarnessError {
    fn from(e: ConfigErrors) -> Self {
        HarnessError::Config(e.to_string())
    }
}

impl From<lowrank_rl::Error> for HarnessError {
    fn from(e: lowrank_rl::Error) -> Self {
        match e {
            lowrank_rl::Error::Config(m) => HarnessError::Config(m),
            other => HarnessError::Runtime(other.to_string()),
        }
    }
}
