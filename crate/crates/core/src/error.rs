use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("line {line}: duplicate shot_id `{shot_id}` (first seen on line {first_line})")]
    DuplicateShotId { line: usize, first_line: usize, shot_id: String },

    #[error("line {line}: invalid frame span [{start}, {end})")]
    InvalidFrameSpan { line: usize, start: u64, end: u64 },

    #[error("unknown label `{0}`")]
    UnknownLabel(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: String, actual: String },

    #[error("media `{uri}` unreadable: {reason}")]
    MediaUnreadable { uri: String, reason: String },

    #[error("frame index {index} outside [{start}, {end})")]
    IndexOutOfRange { index: u64, start: u64, end: u64 },

    #[error("missing map file for index {index}: {path}")]
    MissingMap { index: u64, path: PathBuf },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("checkpoint incompatible with model config; mismatched keys: {}", .0.join(", "))]
    Incompatible(Vec<String>),

    #[error("split {0} has no records")]
    EmptySplit(String),

    #[error("non-finite loss at epoch {epoch}, step {step}: {detail}")]
    NonFiniteLoss { epoch: usize, step: usize, detail: String },

    #[error("epoch {epoch} outside [0, {epochs})")]
    EpochOutOfRange { epoch: usize, epochs: usize },

    #[error("cannot fuse scores of different tasks or class counts: {0}")]
    TaskMismatch(String),

    #[error("anchor {0:?} lies outside the frame")]
    AnchorOutOfBounds((u32, u32, u32, u32)),

    #[error("invalid edit plan: {0}")]
    InvalidPlan(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }

    pub fn dims(expected: impl std::fmt::Debug, actual: impl std::fmt::Debug) -> Self {
        Self::DimensionMismatch { expected: format!("{expected:?}"), actual: format!("{actual:?}") }
    }
}
