//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: lhs {lhs:?} vs rhs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("unknown parameter: {0}")]
    UnknownParam(String),

    #[error("placement error: {0}")]
    Placement(String),

    #[error("planning error: target ratio {target:.4} unreachable, max achievable {max_achievable:.4}")]
    Planning { target: f64, max_achievable: f64 },

    #[error("selection error: target ratio {target:.4} unreachable, max achievable {max_achievable:.4}")]
    Selection { target: f64, max_achievable: f64 },

    #[error("minimum retention: {0}")]
    MinRetention(String),

    #[error("consistency violation: {0}")]
    Consistency(String),

    #[error("ingestion error: {0}")]
    Ingestion(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("stage {stage}: {source}")]
    Stage {
        stage: &'static str,
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
