use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("clip too short: {len} samples, need at least {need}")]
    EmptyFrames { len: usize, need: usize },

    #[error("no signal: {0}")]
    NoSignal(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("autodiff: {0}")]
    Graph(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("I/O error: {0}")]
    Io(#[from] io::Error),

    #[error("WAV error: {0}")]
    Wav(#[from] hound::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures that stem from numerics rather than I/O or usage.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite(_) | Error::Diverged(_))
    }

    pub fn is_io(&self) -> bool {
        matches!(
            self,
            Error::Io(_) | Error::Wav(_) | Error::Format(_) | Error::Json(_)
        )
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Shape(_) => "shape",
            Error::NonFinite(_) => "non_finite",
            Error::EmptyFrames { .. } => "empty_frames",
            Error::NoSignal(_) => "no_signal",
            Error::Contract(_) => "contract",
            Error::Graph(_) => "graph",
            Error::Diverged(_) => "diverged",
            Error::Format(_) => "format",
            Error::Io(_) => "io",
            Error::Wav(_) => "wav",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
