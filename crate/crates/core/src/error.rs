use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed record header at byte {offset}: {reason}")]
    MalformedHeader { offset: usize, reason: String },
    #[error(
        "channel-length mismatch: channel {channel:?} has {found} samples, expected {expected} (data offset {offset})"
    )]
    ChannelLengthMismatch {
        channel: String,
        expected: usize,
        found: usize,
        offset: usize,
    },
    #[error("invalid sampling frequency {0} Hz")]
    InvalidSampleRate(f64),
    #[error("invalid annotation #{index}: {reason}")]
    InvalidAnnotation { index: usize, reason: String },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("missing channel {0:?}")]
    MissingChannel(String),
    #[error("invalid filter specification: {0}")]
    InvalidFilter(String),
    #[error("signal too short: {len} samples, need more than {min}")]
    SignalTooShort { len: usize, min: usize },
    #[error("unsupported resampling ratio {fs_in} Hz -> {fs_out} Hz")]
    UnsupportedRatio { fs_in: f64, fs_out: f64 },
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("training diverged at epoch {epoch}, step {step}: {reason}")]
    Diverged { epoch: usize, step: usize, reason: String },
    #[error("undefined statistic: {0}")]
    Undefined(&'static str),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
