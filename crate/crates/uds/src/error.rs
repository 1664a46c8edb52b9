//! Error type shared across the toolkit, with a stable mapping onto the
//! process exit codes used by the command-line driver:
//!
//! * `0` — success
//! * `1` — a verification suite ran and reported failing cases
//! * `2` — invalid input, configuration, or file format
//! * `3` — internal error (including an exceeded triple budget)

use thiserror::Error;

pub type Result<T> = std::result::Result<T, UdsError>;

#[derive(Debug, Error)]
pub enum UdsError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("verification failed: {0}")]
    Verification(String),

    #[error("trace aborted: {reason}")]
    AbortedTrace {
        reason: String,
        /// The iteration records produced before the failing step, one
        /// JSON document per line, so callers can persist them.
        partial_trace: String,
    },

    #[error(
        "triple budget exceeded while building level {level}: {have} triples so far, budget {budget}"
    )]
    BudgetExceeded {
        level: u32,
        have: usize,
        budget: usize,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),

    #[error("internal error: {0}")]
    Internal(String),
}

impl UdsError {
    pub fn invalid_input(msg: impl Into<String>) -> Self {
        UdsError::InvalidInput(msg.into())
    }

    pub fn verification(msg: impl Into<String>) -> Self {
        UdsError::Verification(msg.into())
    }

    pub fn internal(msg: impl Into<String>) -> Self {
        UdsError::Internal(msg.into())
    }

    /// Process exit code for the command-line driver.
    pub fn exit_code(&self) -> i32 {
        match self {
            UdsError::Verification(_) | UdsError::AbortedTrace { .. } => 1,
            UdsError::InvalidInput(_) | UdsError::Serde(_) => 2,
            UdsError::Io(_) | UdsError::Internal(_) | UdsError::BudgetExceeded { .. } => 3,
        }
    }
}
