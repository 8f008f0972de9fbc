use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid device: {0}")]
    InvalidDevice(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid plan: {0}")]
    InvalidPlan(String),

    #[error("infeasible occupancy: {0}")]
    InfeasibleOccupancy(String),

    #[error("invalid domain: {0}")]
    InvalidDomain(String),

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error(
        "data race on `{array}`[{index}] in step {step} phase {phase}: TB {reader} accessed a value TB {writer} wrote in the same phase"
    )]
    DataRace {
        array: String,
        index: usize,
        step: usize,
        phase: usize,
        reader: usize,
        writer: usize,
    },

    #[error("stale read of `{array}`[{index}] by TB {reader}: newest value is held in the cache of TB {owner}")]
    StaleRead {
        array: String,
        index: usize,
        reader: usize,
        owner: usize,
    },

    #[error("TB {writer} stored to `{array}`[{index}], which is cached by TB {owner}")]
    OwnershipViolation {
        array: String,
        index: usize,
        writer: usize,
        owner: usize,
    },

    #[error("index {index} out of bounds for `{array}` (len {len})")]
    OutOfBounds { array: String, index: usize, len: usize },

    #[error("not found: {0}")]
    NotFound(String),

    #[error("matrix is not symmetric: {0}")]
    NotSymmetric(String),

    #[error("matrix is not positive definite: <p, Ap> = {0:e} at iteration {1}")]
    NotPositiveDefinite(f64, usize),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
