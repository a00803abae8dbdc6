//! Crate-wide error type.

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor/matrix dimensions do not line up; `axis` names the offending axis.
    #[error("dimension mismatch on {axis}: {detail}")]
    Dim { axis: &'static str, detail: String },

    /// Invalid configuration value.
    #[error("configuration error: {0}")]
    Config(String),

    /// Labels outside the supported set, or a single-class label vector where
    /// both classes are required.
    #[error("label error: {0}")]
    Label(String),

    /// API misuse (e.g. backward on a non-scalar loss).
    #[error("usage error: {0}")]
    Usage(String),

    /// Operation received an empty input.
    #[error("empty input: {0}")]
    Empty(String),

    /// Degenerate numeric input (all-zero window, duplicate-only data, ...).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// Numerical failure (rank deficiency, non-convergence of an eigensolver).
    #[error("numerical error: {0}")]
    Numerical(String),

    /// A file or manifest failed validation; `field` names what was wrong.
    #[error("validation error in `{field}`: {detail}")]
    Validation { field: String, detail: String },

    /// Training produced a non-finite loss.
    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },

    /// Iterative optimization failed, carrying the iteration index.
    #[error("optimization error at iteration {iter}: {detail}")]
    Optim { iter: usize, detail: String },

    /// Operation not supported for this model kind.
    #[error("unsupported operation: {0}")]
    Unsupported(String),

    /// I/O failure with path context.
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    pub fn validation(field: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
