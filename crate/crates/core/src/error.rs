use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the retrieval pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("unreadable audio file {path}: {reason}")]
    UnreadableAudio { path: PathBuf, reason: String },

    #[error("unsupported encoding: {0}")]
    UnsupportedEncoding(String),

    #[error("zero-length audio")]
    EmptyAudio,

    #[error("invalid waveform: {0}")]
    InvalidWaveform(String),

    #[error("invalid synthesis parameters: {0}")]
    InvalidSynthSpec(String),

    #[error("aliasing: partial at {freq:.1} Hz exceeds Nyquist {nyquist:.1} Hz")]
    Aliasing { freq: f64, nyquist: f64 },

    #[error("invalid filterbank configuration: {0}")]
    InvalidFilterbank(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("path list mismatch: {0}")]
    PathMismatch(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("descriptor mismatch: {expected} vs {got}")]
    DescriptorMismatch { expected: String, got: String },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("no pull terms: every class has a single member")]
    NoPullTerms,

    #[error("non-finite loss at iteration {0}; check feature scaling")]
    NonFiniteLoss(usize),

    #[error("not enough items: requested {requested}, only {available} retrievable")]
    NotEnoughItems { requested: usize, available: usize },

    #[error("unparseable filename stem {stem:?}: {reason}")]
    UnparseableStem { stem: String, reason: String },

    #[error("no audio found under {0}")]
    NoAudioFound(PathBuf),

    #[error("disconnected kernel graph at bandwidth {bandwidth}: {components} components")]
    DisconnectedGraph { bandwidth: f64, components: usize },

    #[error("eigendecomposition failed: {0}")]
    Eigen(String),

    #[error("malformed archive {path}: {reason}")]
    MalformedArchive { path: PathBuf, reason: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
