use thiserror::Error;

/// Errors raised anywhere in the model, data pipeline, or harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("non-finite value produced by `{op}` (tape node {node})")]
    NonFinite { op: &'static str, node: usize },
    #[error("infeasible CTC target: {target_len} labels need {required} frames, got {frames}")]
    InfeasibleTarget {
        target_len: usize,
        required: usize,
        frames: usize,
    },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("corrupt container: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn contract<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Contract(msg.into()))
}
