use std::path::PathBuf;

use thiserror::Error;

/// Every failure the pipeline can report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("image `{stem}` has no matching mask")]
    MissingMask { stem: String },

    #[error("no image/mask pairs found under {}", root.display())]
    EmptyDataset { root: PathBuf },

    #[error("target size {h}x{w} is not divisible by 16")]
    BadTargetSize { h: usize, w: usize },

    #[error("cannot decode {}: {msg}", path.display())]
    Decode { path: PathBuf, msg: String },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("resolution {h}x{w} is not divisible by 16")]
    BadResolution { h: usize, w: usize },

    #[error("backend unavailable: {}", path.display())]
    BackendUnavailable { path: PathBuf },

    #[error("corrupt weights: {0}")]
    CorruptWeights(String),

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("channel mismatch: expected {expected}, found {found}")]
    ChannelMismatch { expected: usize, found: usize },

    #[error("input is not binary: {0}")]
    NonBinaryInput(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("non-finite value in `{tensor}`")]
    NonFiniteLoss { tensor: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Stable variant name for structured error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::MissingMask { .. } => "MissingMask",
            Error::EmptyDataset { .. } => "EmptyDataset",
            Error::BadTargetSize { .. } => "BadTargetSize",
            Error::Decode { .. } => "DecodeError",
            Error::ShapeMismatch(_) => "ShapeMismatch",
            Error::BadResolution { .. } => "BadResolution",
            Error::BackendUnavailable { .. } => "BackendUnavailable",
            Error::CorruptWeights(_) => "CorruptWeights",
            Error::VersionMismatch { .. } => "VersionMismatch",
            Error::ChannelMismatch { .. } => "ChannelMismatch",
            Error::NonBinaryInput(_) => "NonBinaryInput",
            Error::EmptyInput(_) => "EmptyInput",
            Error::NonFiniteLoss { .. } => "NonFiniteLoss",
            Error::Config(_) => "ConfigError",
            Error::Io { .. } => "IOError",
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
