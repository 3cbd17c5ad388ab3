use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid argument to {op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },

    #[error("image dimension mismatch: {lhs:?} vs {rhs:?} (width, height)")]
    DimensionMismatch {
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("batch norm in train mode needs at least two values per channel, got {0}")]
    DegenerateBatch(usize),

    #[error("frequency index ({a}, {b}) out of range for a {h}x{w} map")]
    FrequencyOutOfRange {
        a: usize,
        b: usize,
        h: usize,
        w: usize,
    },

    #[error("requested {count} distinct frequencies but a {h}x{w} map only has {available}")]
    TooManyFrequencies {
        count: usize,
        h: usize,
        w: usize,
        available: usize,
    },

    #[error("invalid network config: {0}")]
    Config(String),

    #[error("unknown block structure `{name}` (available: {available})")]
    UnknownStructure { name: String, available: String },

    #[error("model file: bad magic {0:?}")]
    BadMagic([u8; 4]),

    #[error("model file: unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("model file: truncated while reading {0}")]
    Truncated(String),

    #[error("tensor `{name}` shape mismatch: found {found}, config expects {expected}")]
    ParamShape {
        name: String,
        found: String,
        expected: String,
    },

    /// Malformed model file or metrics table.
    #[error("malformed file: {0}")]
    Format(String),

    #[error("{path}: unsupported magic {magic:?}")]
    UnsupportedMagic { path: String, magic: String },

    #[error("{path}: unsupported maxval {maxval} (only 255)")]
    UnsupportedMaxval { path: String, maxval: u32 },

    #[error("{path}: malformed header: {reason}")]
    BadHeader { path: String, reason: String },

    #[error("{path}: truncated payload, expected {expected} bytes, found {found}")]
    TruncatedPayload {
        path: String,
        expected: usize,
        found: usize,
    },

    #[error("expected a {expected}-channel image, got {found} channels")]
    ChannelCount { expected: usize, found: usize },

    #[error("dataset at {0} contains no usable pairs")]
    EmptyDataset(PathBuf),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(op: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            reason: reason.into(),
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
