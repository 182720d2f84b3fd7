//! Error taxonomy shared across the crate.
//!
//! The CLI maps these onto its exit-code contract: 0 success, 1 check
//! failure, 2 input error, 3 runtime divergence.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied parameter is outside its admissible range.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// Input data violates a precondition (non-finite entries, dimension
    /// mismatches, empty batches).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// An iterative numeric routine failed to converge or produced a
    /// non-finite value.
    #[error("numeric failure: {0}")]
    NumericFailure(String),

    /// A block, token, or rule id does not exist.
    #[error("not found: {0}")]
    NotFound(String),

    /// A requested configuration cannot be realized (sequence too short,
    /// more anchors than dimensions, ...).
    #[error("infeasible config: {0}")]
    Infeasible(String),

    /// Rule DSL syntax error with source position and the token set the
    /// parser would have accepted.
    #[error("parse error at line {line}, column {col}: expected {expected}, found {found}")]
    Parse {
        line: usize,
        col: usize,
        expected: String,
        found: String,
    },

    /// Optimistic-concurrency violation in the rule store.
    #[error("version conflict on rule '{id}': expected base version {expected}, store has {actual}")]
    Conflict {
        id: String,
        expected: u64,
        actual: u64,
    },

    /// A rule references a block or head the partition/model does not have.
    #[error("compile error for rule '{rule}': {reason}")]
    Compile { rule: String, reason: String },

    /// A checkpoint or dataset does not match the partition it claims.
    #[error("checksum mismatch: {0}")]
    ChecksumMismatch(String),

    /// Training loss exceeded the divergence guard or became non-finite.
    #[error("training diverged at step {step} (loss {loss})")]
    Diverged { step: u64, loss: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Exit code under the CLI contract.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Diverged { .. } => 3,
            _ => 2,
        }
    }
}
