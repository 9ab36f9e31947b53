use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch { op: &'static str, left: (usize, usize), right: (usize, usize) },

    #[error("backward requires a 1x1 sink, got {0:?}")]
    NonScalarSink((usize, usize)),

    #[error("backward called before forward")]
    NotEvaluated,

    #[error("node {0} is not a leaf")]
    NotALeaf(usize),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("class {class} has no confident support")]
    NoConfidentSupport { class: usize },

    #[error("support sample {sample} has no candidate label")]
    NoCandidate { sample: usize },

    #[error("neighbor count k={k} out of range for {n} samples (need 1 <= k <= {n}-1)")]
    NeighborCount { k: usize, n: usize },

    #[error("sample {sample} has an empty neighbor list")]
    EmptyNeighbors { sample: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("non-finite loss at epoch {epoch}, task {task}")]
    NonFiniteLoss { epoch: usize, task: usize },

    #[error("line {line}: expected {expected} features, found {found}")]
    RaggedRow { line: usize, expected: usize, found: usize },

    #[error("line {line}: invalid class value {value:?}")]
    BadClass { line: usize, value: String },

    #[error("line {line}: invalid feature value {value:?}")]
    BadFeature { line: usize, value: String },

    #[error("line {line}: header must start with a `class` column")]
    MissingClassColumn { line: usize },

    #[error("dataset contains no records")]
    EmptyDataset,

    #[error("unknown method {name:?}; valid methods: {valid}")]
    UnknownMethod { name: String, valid: String },

    #[error("checkpoint not found: {0}")]
    MissingCheckpoint(PathBuf),

    #[error("class pool has {available} classes, need {required}")]
    PoolTooSmall { available: usize, required: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }
}
