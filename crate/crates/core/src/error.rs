use thiserror::Error;

/// Errors raised by tensor arithmetic, module construction, and the harness.
#[derive(Debug, Error)]
pub enum PetError {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = PetError> = std::result::Result<T, E>;

impl PetError {
    pub(crate) fn dim(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        PetError::Dimension {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        PetError::Contract(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        PetError::Config(msg.into())
    }
}
