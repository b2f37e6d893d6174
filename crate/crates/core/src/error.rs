use std::path::PathBuf;

use ldprune_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("invalid U-Net spec: {0}")]
    InvalidSpec(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("unknown operator `{0}`")]
    UnknownOperator(String),

    #[error("shape inference failed at `{node}`: {detail}")]
    Shape { node: String, detail: String },

    #[error("cannot modify `{op}`: {detail}")]
    Modification { op: String, detail: String },

    #[error("operator `{op}`: {source}")]
    Operator {
        op: String,
        #[source]
        source: Box<CoreError>,
    },

    #[error("training diverged at step {step}; state dumped to {}", dump.display())]
    Diverged { step: usize, dump: PathBuf },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CoreError {
    pub(crate) fn shape(node: impl Into<String>, detail: impl Into<String>) -> Self {
        CoreError::Shape {
            node: node.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn modification(op: impl Into<String>, detail: impl Into<String>) -> Self {
        CoreError::Modification {
            op: op.into(),
            detail: detail.into(),
        }
    }

    /// Wraps an error with the operator it happened under.
    pub fn in_operator(self, op: impl Into<String>) -> Self {
        CoreError::Operator {
            op: op.into(),
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, CoreError>;
