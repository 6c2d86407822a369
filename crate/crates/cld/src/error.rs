//! Crate-wide error type and exit-code mapping.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CldError {
    #[error("degenerate norm in {context} (row {row}): vector norm below 1e-12")]
    DegenerateNorm { context: String, row: usize },

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimMismatch {
        context: String,
        expected: usize,
        got: usize,
    },

    #[error("empty input to {0}")]
    EmptyInput(&'static str),

    #[error("invalid config: {key} {msg}")]
    InvalidConfig { key: String, msg: String },

    #[error("invalid argument to {context}: {msg}")]
    InvalidArgument { context: &'static str, msg: String },

    #[error("non-finite value in {name}")]
    NonFinite { name: String },

    #[error("bad file format in {path}: {msg}")]
    Format { path: String, msg: String },

    #[error("eigensolver failed to converge after {sweeps} sweeps")]
    EigensolverDiverged { sweeps: usize },

    #[error("training aborted at step {step}: {source}")]
    TrainStep {
        step: usize,
        #[source]
        source: Box<CldError>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CldError {
    /// Process exit code for the CLI: 1 config, 2 runtime/numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            CldError::InvalidConfig { .. } => 1,
            CldError::Json(_) => 1,
            CldError::TrainStep { source, .. } => source.exit_code(),
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, CldError>;
