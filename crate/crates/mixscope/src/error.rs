//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("trace contains no events")]
    EmptyTrace,

    #[error("sender {name:?} has no messages; its profile is undefined")]
    UndefinedProfile { name: String },

    #[error("threshold {threshold} exceeds the {available} events in the trace; no complete round")]
    EmptyObservation { threshold: usize, available: usize },

    #[error("invalid observation window: {0}")]
    InvalidObservation(String),

    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },

    #[error("receiver index {index} out of range ({count} receivers)")]
    ReceiverOutOfRange { index: usize, count: usize },

    #[error("need at least {needed} rounds, got {got}")]
    NotEnoughRounds { needed: usize, got: usize },

    #[error("profile row {row} is not a probability distribution (sum = {sum})")]
    NonStochasticRow { row: usize, sum: f64 },

    #[error("sender {sender} has zero input variance; prediction is undefined")]
    DegenerateVariance { sender: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("invalid JSON: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
