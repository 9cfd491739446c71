use thiserror::Error;

/// Errors surfaced by the library. The CLI maps these onto exit codes:
/// divergence -> 1, usage/config/format -> 2.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dim(String),

    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("dataset consistency error: {0}")]
    Consistency(String),

    #[error("training diverged at epoch {epoch}, step {step}: {context}")]
    Divergence {
        epoch: usize,
        step: usize,
        context: String,
    },

    #[error("checkpoint version mismatch: {0}")]
    Version(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
