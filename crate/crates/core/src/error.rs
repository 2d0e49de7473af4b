//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: expected shape {expected}, got {got:?}")]
    BadShape {
        op: &'static str,
        expected: String,
        got: Vec<usize>,
    },

    #[error("label {label} out of range for {classes} classes (example {example})")]
    LabelOutOfRange {
        label: usize,
        classes: usize,
        example: usize,
    },

    #[error("clamp bounds inverted: lo {lo} > hi {hi}")]
    ClampBounds { lo: f64, hi: f64 },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarBackward(Vec<usize>),

    #[error("non-finite loss at batch example {example}{context}")]
    NonFiniteLoss { example: usize, context: String },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("corrupt file {path}: {detail}")]
    Format { path: String, detail: String },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Error {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Attaches epoch/batch context to numeric failures raised inside a
    /// training loop.
    pub fn with_train_context(self, epoch: usize, batch: usize) -> Error {
        match self {
            Error::NonFiniteLoss { example, .. } => Error::NonFiniteLoss {
                example,
                context: format!(" (epoch {epoch}, batch {batch})"),
            },
            other => other,
        }
    }

    /// True for failures of the running computation rather than of the
    /// configuration; the CLI maps these to a distinct exit code.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFiniteLoss { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
