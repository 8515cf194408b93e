use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("concept `{concept}` is not applicable: {reason}")]
    NotApplicable { concept: String, reason: String },
    #[error("metric undefined: {0}")]
    UndefinedMetric(String),
    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },
    #[error(transparent)]
    Checkpoint(#[from] crate::trainer::checkpoint::CheckpointError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

pub(crate) fn usage_err(msg: impl Into<String>) -> Error {
    Error::Usage(msg.into())
}

pub(crate) fn data_err(msg: impl Into<String>) -> Error {
    Error::Data(msg.into())
}
