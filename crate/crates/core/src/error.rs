use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {context}")]
    NonFinite { context: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("invalid rotation: {0}")]
    InvalidRotation(String),

    #[error("degenerate 6D rotation at frame {frame}, joint {joint}")]
    DegenerateRotation { frame: usize, joint: usize },

    #[error("topology mismatch: {0}")]
    Topology(String),

    #[error("bvh parse error at line {line}: {message}")]
    Bvh { line: usize, message: String },

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error("training diverged at step {step}")]
    Diverged {
        step: usize,
        last_good: Box<crate::numerics::ParamStore>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn non_finite(context: impl Into<String>) -> Self {
        Error::NonFinite {
            context: context.into(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Prefixes the context of a `NonFinite` error, leaving other variants untouched.
    pub fn within(self, scope: &str) -> Self {
        match self {
            Error::NonFinite { context } => Error::NonFinite {
                context: format!("{scope}: {context}"),
            },
            other => other,
        }
    }
}
