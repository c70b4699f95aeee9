use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid waveform: {0}")]
    InvalidWaveform(String),

    #[error("waveform has {len} samples but at least {min} are required")]
    TooShort { len: usize, min: usize },

    #[error("invalid STFT configuration: {0}")]
    InvalidStftConfig(String),

    #[error("malformed WAV header: {0}")]
    WavMalformed(String),

    #[error("unsupported WAV codec: {0}")]
    WavUnsupported(String),

    #[error("truncated WAV data in {0}")]
    WavTruncated(PathBuf),

    #[error("shape mismatch on {axis}: {detail}")]
    Shape { axis: String, detail: String },

    #[error("invalid layer specification: {0}")]
    InvalidLayer(String),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("knowledge-distillation taps disagree at stage {stage}: {detail}")]
    TapMismatch { stage: usize, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(axis: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Shape {
            axis: axis.into(),
            detail: detail.into(),
        }
    }

    /// True for failures caused by the data or tensor geometry rather than
    /// by the numerics.
    pub fn is_data_error(&self) -> bool {
        !matches!(self, Error::NonFinite(_))
    }
}
