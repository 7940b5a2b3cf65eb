//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("{family}: argument {value} outside domain ({bound})")]
    DomainViolation {
        family: &'static str,
        value: f64,
        bound: &'static str,
    },

    #[error("{context}: matrix is not symmetric positive definite")]
    NotSpd { context: &'static str },

    #[error("parameter {name} must be positive, got {value}")]
    NotPositive { name: &'static str, value: f64 },

    #[error("non-finite value encountered at time index {t} in {context}")]
    NonFinite { context: &'static str, t: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("mode index {index} out of range for {d} modes")]
    ModeIndex { index: usize, d: usize },

    #[error("enumeration guard exceeded: d^(T+1) = {size} > {limit}")]
    EnumerationGuard { size: f64, limit: f64 },

    #[error("csv error in {path} at line {line}: {message}")]
    Csv {
        path: String,
        line: usize,
        message: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(
        "objective increased at iteration {iter}: {previous} -> {current} \
         (monotone descent violated beyond slack)"
    )]
    MonotonicityViolation {
        iter: usize,
        previous: f64,
        current: f64,
    },

    #[error("all {n} restarts failed; first error: {first}")]
    AllRestartsFailed { n: usize, first: String },

    #[error("{0}")]
    Numeric(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 1 usage/config, 2 data, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) => 1,
            Error::Csv { .. } | Error::Io { .. } | Error::DimensionMismatch { .. } => 2,
            _ => 3,
        }
    }
}
