use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    InvalidShape { op: &'static str, msg: String },

    #[error("axis {axis} is out of range for a tensor of rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("parameter `{0}` has no gradient")]
    MissingGradient(String),

    #[error("duplicate parameter name `{0}`")]
    DuplicateParameter(String),

    #[error("box has negative extent: {0:?}")]
    NegativeExtent([f64; 4]),

    #[error("box forms differ: {0}")]
    MixedBoxForms(String),

    #[error("out-of-vocabulary word(s): {}", .0.join(", "))]
    OutOfVocabulary(Vec<String>),

    #[error("unknown token id {0}")]
    UnknownTokenId(usize),

    #[error("invalid vocabulary: {0}")]
    InvalidVocabulary(String),

    #[error("sample {sample}: {msg}")]
    InvalidSample { sample: u64, msg: String },

    #[error("sample {sample}: annotation spans overlap ({a:?} and {b:?})")]
    OverlappingSpans {
        sample: u64,
        a: (usize, usize),
        b: (usize, usize),
    },

    #[error("cannot place {count} objects on a {width}x{height} canvas: {msg}")]
    Placement {
        count: usize,
        width: usize,
        height: usize,
        msg: String,
    },

    #[error("input contains no [MASK] token")]
    NoMask,

    #[error("context of length {len} exceeds the positional range {max}")]
    ContextTooLong { len: usize, max: usize },

    #[error("cannot assign {gts} ground truths to {queries} queries")]
    TooManyTargets { gts: usize, queries: usize },

    #[error("image {height}x{width} is not divisible by patch size {patch}")]
    IndivisibleImage {
        height: usize,
        width: usize,
        patch: usize,
    },

    #[error("invalid bin count {bins}: {msg}")]
    InvalidBins { bins: usize, msg: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config field `{field}`: {msg}")]
    Config { field: String, msg: String },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("training diverged at step {step}: {msg}")]
    Diverged { step: u64, msg: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },

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

    pub(crate) fn config(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            msg: msg.into(),
        }
    }
}
