use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("invalid argument to {op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    #[error("tape error: {0}")]
    Tape(String),

    #[error("no valid pixels for {op}")]
    EmptyMask { op: &'static str },

    #[error("config error: {0}")]
    Config(String),

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("checksum mismatch for {path}")]
    Checksum { path: PathBuf },

    #[error("non-finite {term} loss at step {step}")]
    NonFiniteLoss { term: &'static str, step: usize },

    #[error("camera at {position:?} is outside the tube")]
    CameraOutsideTube { position: [f64; 3] },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            what,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input (config, arguments, file
    /// contents) rather than a failure during computation.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::InvalidArgument { .. } | Error::Format { .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
