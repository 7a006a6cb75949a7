use std::path::PathBuf;

use thiserror::Error;

use crate::model::BlockId;
use crate::training::Checkpoint;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid depth {depth}: depth must be at least 8 and (depth - 2) must be divisible by 6 (one third of (depth - 2) / 2 blocks per stage)")]
    InvalidDepth { depth: usize },

    #[error("invalid network spec: {0}")]
    InvalidSpec(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("parameter store inconsistent with spec: {0}")]
    Params(String),

    #[error("non-finite loss for sample {index} of the batch")]
    NonFiniteLoss { index: usize },

    #[error("non-finite gradient in `{key}`")]
    NonFiniteGradient { key: String },

    #[error("{path}: {len} bytes is not a multiple of the 3073-byte CIFAR-10 record size")]
    TruncatedCifar { path: PathBuf, len: u64 },

    #[error("{path}: record {record} has label {label}, expected 0..=9")]
    BadCifarLabel {
        path: PathBuf,
        record: usize,
        label: u8,
    },

    #[error("unknown corruption kind `{0}` (expected gaussian_noise, box_blur, brightness or contrast)")]
    UnknownCorruption(String),

    #[error("pruning density {requested} exceeds the {max} removable blocks")]
    DensityTooLarge { requested: usize, max: usize },

    #[error("block {0} cannot be removed: its shortcut is not an identity mapping")]
    NotRemovable(BlockId),

    #[error("filter target {target} is infeasible; achievable kept-filter counts are {min_achievable}..={max_achievable}")]
    InfeasibleFilterTarget {
        target: usize,
        min_achievable: usize,
        max_achievable: usize,
    },

    #[error("no checkpoint for epoch {epoch}; available epochs: {available:?}")]
    MissingCheckpoint { epoch: usize, available: Vec<usize> },

    #[error("training diverged at epoch {epoch}, batch {batch}: {cause}")]
    Diverged {
        epoch: usize,
        batch: usize,
        cause: Box<Error>,
        last_good: Box<Checkpoint>,
    },

    #[error("label space mismatch: {0}")]
    LabelSpace(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
