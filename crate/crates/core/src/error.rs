use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("row {row} has norm {norm:e}, at or below the floor {eps:e} (collapsed embedding)")]
    RowNormUnderflow { row: usize, norm: f64, eps: f64 },

    #[error("row {row} of the prediction has norm {norm:e}; cosine similarity is undefined")]
    ZeroVector { row: usize, norm: f64 },

    #[error("batch norm in training mode needs at least 2 rows, got {0}")]
    BatchTooSmall(usize),

    #[error("cannot push {batch} rows into a support set of capacity {capacity}")]
    BatchLargerThanQueue { batch: usize, capacity: usize },

    #[error("top-k requires 1 <= k <= {capacity}, got k = {k}")]
    KOutOfRange { k: usize, capacity: usize },

    #[error("support set has no label buffer")]
    LabelsUnavailable,

    #[error("non-finite gradient in parameter {0}")]
    NonFiniteGradient(String),

    #[error("step {step} outside schedule range [0, {total}]")]
    StepOutOfRange { step: u64, total: u64 },

    #[error(
        "image {height}x{width} is smaller than the requested output {out_height}x{out_width}"
    )]
    ImageTooSmall {
        height: usize,
        width: usize,
        out_height: usize,
        out_width: usize,
    },

    #[error("could not place {classes} cluster means with the required separation after {attempts} attempts")]
    SeparationUnsatisfiable { classes: usize, attempts: usize },

    #[error("missing data file {0}")]
    FileMissing(PathBuf),

    #[error("{path}: length {len} is not a multiple of the {record}-byte record size")]
    RecordSizeMismatch {
        path: PathBuf,
        len: u64,
        record: usize,
    },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("class {0} has no training samples")]
    ClassMissingFromTrain(usize),

    #[error("checkpoint not found: {0}")]
    CheckpointMissing(PathBuf),

    #[error("not a checkpoint file (bad magic bytes)")]
    BadMagic,

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("config key `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }
}
