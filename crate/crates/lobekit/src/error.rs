//! Crate-wide error type.

use std::path::PathBuf;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("malformed MetaImage header {path}: {reason}")]
    MalformedHeader { path: PathBuf, reason: String },

    #[error("unsupported element type `{0}` (supported: MET_SHORT, MET_UCHAR, MET_FLOAT)")]
    UnsupportedElementType(String),

    #[error("raw data size mismatch: header implies {expected} bytes, file has {actual}")]
    SizeMismatch { expected: u64, actual: u64 },

    #[error("label value {0} outside the valid range 0..=5")]
    InvalidLabel(u8),

    #[error("crop region {lo:?}..{hi:?} out of bounds for dims {dims:?}")]
    RegionOutOfBounds {
        lo: [usize; 3],
        hi: [usize; 3],
        dims: [usize; 3],
    },

    #[error("degenerate histogram: all voxels fall into a single bin")]
    DegenerateHistogram,

    #[error("no lung candidate component survived filtering")]
    NoLungCandidate,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("spatial dims {0:?} must be even")]
    OddSpatialDim([usize; 3]),

    #[error("backward requires a scalar loss, got {0} elements")]
    NotScalar(usize),

    #[error("variable does not belong to this graph")]
    DetachedGraph,

    #[error("parameter `{0}` has no accumulated gradient")]
    MissingGradient(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("non-finite loss at epoch {epoch}, sample {sample}")]
    NonFiniteLoss { epoch: usize, sample: usize },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
