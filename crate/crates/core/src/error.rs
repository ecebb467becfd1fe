//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor shapes for an operation.
    #[error("shape mismatch in {op}: left {left:?} vs right {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    /// A dimension-level precondition failed (channel counts, divisibility, rank).
    #[error("dimension error in {op}: {msg}")]
    Dimension { op: &'static str, msg: String },

    /// An operation was called outside its contract (non-scalar loss, detached graph, ...).
    #[error("contract violation in {op}: {msg}")]
    Contract { op: &'static str, msg: String },

    /// Invalid configuration value or inconsistent configuration file.
    #[error("config error: {0}")]
    Config(String),

    /// Labels are expected to be strictly binary.
    #[error("label error: {0}")]
    Label(String),

    /// Telemetry snapshots out of alignment.
    #[error("telemetry error: {0}")]
    Telemetry(String),

    /// A metric has no defined value on this input.
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// A function handed to the finite-difference checker returned different
    /// values on identical inputs.
    #[error("non-deterministic function under fixed seed: {0}")]
    NonDeterministic(String),

    /// Optimizer state does not match the parameters it is applied to.
    #[error("optimizer state error: {0}")]
    OptimizerState(String),

    /// Training aborted on a non-finite loss.
    #[error("non-finite loss at epoch {epoch}, batch {batch}; recent losses: {tail:?}")]
    NanLoss {
        epoch: usize,
        batch: usize,
        tail: Vec<f64>,
    },

    /// Malformed or mismatched checkpoint container.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// An internal invariant was violated; indicates a bug, not bad input.
    #[error("internal invariant violation: {0}")]
    Internal(String),

    #[error("csv parse error at line {line}: {msg}")]
    CsvParse { line: usize, msg: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {msg}")]
    Image { path: PathBuf, msg: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code the CLI maps this error to.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } | Error::Image { .. } => 2,
            _ => 1,
        }
    }
}
