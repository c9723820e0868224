use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid {what}: {reason}")]
    Invalid { what: &'static str, reason: String },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("index out of bounds: {0}")]
    OutOfBounds(String),

    #[error("histogram is empty")]
    EmptyHistogram,

    #[error("volume is constant ({0}); cannot separate two materials")]
    ConstantVolume(f64),

    #[error("no metal found")]
    NoMetalFound,

    #[error("mask is empty")]
    EmptyMask,

    #[error("unknown material label `{0}`")]
    UnknownMaterial(String),

    #[error("solver did not converge after {iterations} iterations (relative residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },

    #[error("inpainting region has a component with no outside neighbour")]
    UnanchoredRegion,

    #[error("malformed {kind} file {path}: {reason}")]
    Format {
        kind: &'static str,
        path: PathBuf,
        reason: String,
    },

    #[error("config: {0}")]
    Config(String),

    #[error("stage `{stage}` failed")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(what: &'static str, reason: impl Into<String>) -> Self {
        Error::Invalid {
            what,
            reason: reason.into(),
        }
    }

    /// Innermost error, with stage wrappers peeled off.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }
}
