use thiserror::Error;

/// Errors surfaced by tensor ops, model building, data loading, training,
/// plan compilation, and execution.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("loss diverged (non-finite) at iteration {0}")]
    Diverged(usize),

    #[error("format error in {path}: {reason}")]
    Format { path: String, reason: String },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn format(path: impl AsRef<std::path::Path>, reason: impl Into<String>) -> Self {
        Error::Format { path: path.as_ref().display().to_string(), reason: reason.into() }
    }
}
