//! Experiment harness: configuration, data, training, checkpoints,
//! evaluation and plot data.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod eval;
pub mod plots;
pub mod pricecheck;
pub mod seeds;
pub mod train;

use thiserror::Error;

use crate::contracts::ContractError;
use crate::diffcore::DiffError;
use crate::market::MarketError;
use crate::optim::OptimError;
use crate::policy::PolicyError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("checkpoint belongs to problem {found}, expected {expected}")]
    HashMismatch { expected: String, found: String },
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("training diverged at iteration {iteration}: validation loss {loss:e} against initial {initial:e}")]
    Diverged { iteration: u64, loss: f64, initial: f64 },
    #[error("validation target {target:e} not reached within {iterations} iterations (best {best:e})")]
    TargetNotReached { target: f64, iterations: u64, best: f64 },
    #[error(transparent)]
    Market(#[from] MarketError),
    #[error(transparent)]
    Contract(#[from] ContractError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type HarnessResult<T> = Result<T, HarnessError>;

impl HarnessError {
    /// Process exit code: 2 for configuration problems, 3 for numerical
    /// failures, 4 when a validation target was missed.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_)
            | HarnessError::HashMismatch { .. }
            | HarnessError::Checkpoint(_)
            | HarnessError::Io(_)
            | HarnessError::Json(_) => 2,
            HarnessError::TargetNotReached { .. } => 4,
            HarnessError::Numerical(_)
            | HarnessError::Diverged { .. }
            | HarnessError::Market(_)
            | HarnessError::Contract(_)
            | HarnessError::Policy(_)
            | HarnessError::Optim(_)
            | HarnessError::Diff(_) => 3,
        }
    }
}
