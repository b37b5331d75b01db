use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("wrong IDX magic: expected {expected:#010x}, found {found:#010x}")]
    WrongMagic { expected: u32, found: u32 },

    #[error("truncated input: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },

    #[error("unexpected image dimensions {rows}x{cols} (strict mode requires 28x28)")]
    BadDims { rows: usize, cols: usize },

    #[error("label {label} at position {index} is outside 0..=9")]
    BadLabel { index: usize, label: u8 },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("batch normalization in train mode needs at least 2 values per channel, got {0}")]
    BatchTooSmall(usize),

    #[error("backward called without train-mode statistics")]
    ModeMismatch,

    #[error("max-pool needs even spatial dimensions, got {height}x{width}")]
    OddSpatialDim { height: usize, width: usize },

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("non-finite loss at epoch {epoch}, step {step}: {loss}")]
    NonFiniteLoss { epoch: usize, step: usize, loss: f32 },

    #[error("unknown model `{0}` (expected m3, m5, m7, c1, c2 or c3, optionally with :all, :final or :none)")]
    UnknownModel(String),

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("checkpoint was written for model `{found}`, not `{expected}`")]
    FingerprintMismatch { expected: String, found: String },

    #[error("corrupt checkpoint: {0}")]
    CorruptFile(String),

    #[error("epoch band {from}..={to} is not covered by the metrics log")]
    BandOutOfRange { from: usize, to: usize },

    #[error("unknown ensemble member `{0}`")]
    UnknownMember(String),

    #[error("pool too small: {0}")]
    PoolTooSmall(String),

    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),

    #[error("empty input")]
    Empty,

    #[error("digest mismatch for {path}: expected {expected}, found {found}")]
    DigestMismatch { path: PathBuf, expected: String, found: String },

    #[error("download of {url} failed: {reason}")]
    DownloadFailed { url: String, reason: String },

    #[error("gradient check failed for {failed} of {total} cases")]
    GradCheckFailed { failed: usize, total: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { context: context.into(), source }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }
}
