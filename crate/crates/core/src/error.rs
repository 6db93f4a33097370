use std::io;

use thiserror::Error;

/// Errors raised by the engine.
#[derive(Debug, Error)]
pub enum SpurError {
    #[error("shape error in {op}: {lhs} vs {rhs}")]
    Shape {
        op: &'static str,
        lhs: String,
        rhs: String,
    },
    #[error("input error: {0}")]
    Input(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("run aborted at step {step}: {reason}")]
    Aborted { step: usize, reason: String },
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, SpurError>;

pub(crate) fn shape_err(op: &'static str, lhs: (usize, usize), rhs: (usize, usize)) -> SpurError {
    SpurError::Shape {
        op,
        lhs: format!("{}x{}", lhs.0, lhs.1),
        rhs: format!("{}x{}", rhs.0, rhs.1),
    }
}
