use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = DfnError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum DfnError {
    #[error("shape mismatch on {axis}: {left} vs {right} ({context})")]
    ShapeMismatch {
        context: &'static str,
        axis: &'static str,
        left: usize,
        right: usize,
    },

    #[error("invalid shape for {context}: {detail}")]
    InvalidShape { context: &'static str, detail: String },

    #[error("backward requires a single-element output, got {0} elements")]
    NonScalarOutput(usize),

    #[error("output is detached from every tensor that requires grad")]
    DetachedGraph,

    #[error("invalid model config field `{field}`: {reason}")]
    Config { field: &'static str, reason: String },

    #[error("missing gradient for parameter `{0}`")]
    MissingGradient(String),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("image error for {path}: {reason}")]
    Image { path: PathBuf, reason: String },

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl DfnError {
    pub(crate) fn invalid(context: &'static str, detail: impl Into<String>) -> Self {
        DfnError::InvalidShape {
            context,
            detail: detail.into(),
        }
    }
}
