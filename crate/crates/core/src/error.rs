use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },
    #[error("Riccati iteration did not converge: {0}")]
    NonConvergent(String),
    #[error("bias initialization failed at layer {layer}, unit {unit}: {reason}")]
    InitFailure {
        layer: usize,
        unit: usize,
        reason: String,
    },
    #[error("infeasible fit: {0}")]
    Infeasible(String),
    #[error("no stabilizing fit after {rounds} rounds (gain error {gain_error:.3e})")]
    Unstabilizable { rounds: usize, gain_error: f64 },
    #[error("network is not piecewise linear at layer {0}")]
    NotPiecewiseLinear(usize),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("checkpoint format: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_err(context: &'static str, expected: impl ToString, got: impl ToString) -> Error {
    Error::DimensionMismatch {
        context,
        expected: expected.to_string(),
        got: got.to_string(),
    }
}
