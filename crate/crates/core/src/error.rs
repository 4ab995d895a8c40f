use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {lhs:?} vs {rhs:?}")]
    Shape { lhs: Vec<usize>, rhs: Vec<usize> },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("scratchpad capacity exceeded: requested {requested} bytes, {available} bytes available")]
    Capacity { requested: u64, available: u64 },

    #[error("usage error: {0}")]
    Usage(String),

    /// A main-memory region was read while atomic accumulations into it were
    /// still pending (no barrier or kernel end since the last accumulate).
    #[error("ordering fault: region {region} read before synchronization ({pending} pending accumulations)")]
    OrderingFault { region: usize, pending: usize },

    #[error("infeasible block plan: minimal footprint {needed} bytes exceeds scratchpad of {capacity} bytes")]
    Infeasible { needed: u64, capacity: u64 },

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }
}
