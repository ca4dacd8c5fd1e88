use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

/// Crate-wide error type. Variants carry enough context to name the offending
/// shapes, files, or configurations in the message.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {left:?} vs {right:?} in {op}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("axis {axis} invalid for shape {shape:?}")]
    InvalidAxis { axis: usize, shape: Vec<usize> },

    #[error("reduction over empty axis {axis} of shape {shape:?}")]
    EmptyReduction { axis: usize, shape: Vec<usize> },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("channel mismatch: input has {input} channels, kernel expects {kernel}")]
    ChannelMismatch { input: usize, kernel: usize },

    #[error("parameter {index} is not tracked on this tape")]
    UntrackedParam { index: usize },

    #[error("gradient target must be a tracked scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("variable belongs to a different tape")]
    TapeMismatch,

    #[error("input {side} of {op} must lie in [0,1], found {value}")]
    OutOfRange {
        op: &'static str,
        side: &'static str,
        value: f64,
    },

    #[error("input size {h}x{w} not divisible by total stride {stride}")]
    IndivisibleInput { h: usize, w: usize, stride: usize },

    #[error("no foreground class present in the label vector")]
    NoClassPresent,

    #[error("consistency loss requires one general and one image-specific stack, got two {kind:?}")]
    SameMapKind { kind: crate::cam::MapKind },

    #[error("threshold {tau} outside the open interval (0,1)")]
    BadThreshold { tau: f64 },

    #[error("missing checkpoint for configuration `{config}`")]
    MissingCheckpoint { config: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path} at byte {offset}: {reason}")]
    Parse {
        path: PathBuf,
        offset: u64,
        reason: String,
    },

    #[error("{0}")]
    Config(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<PathBuf>, offset: u64, reason: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            offset,
            reason: reason.into(),
        }
    }
}
