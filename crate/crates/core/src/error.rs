//! Error types shared across the crate.

use std::fmt;
use std::path::PathBuf;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors emitted by tensor ops, model construction, training and I/O.
#[derive(Debug)]
pub enum Error {
    /// Two tensors had incompatible shapes for an operation.
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// A single-tensor precondition failed (bad axis, non-square token grid, ...).
    InvalidArgument(String),
    /// A numeric result left the finite range; carries where it happened.
    NonFinite(String),
    /// Configuration file or flag rejected.
    Config(String),
    /// Checkpoint serialization/deserialization failure.
    Checkpoint(CheckpointError),
    /// Dataset directory or image file failure.
    Dataset(DatasetError),
    Io(std::io::Error),
}

/// Checkpoint failures, split by what exactly is wrong with the file.
#[derive(Debug)]
pub enum CheckpointError {
    /// Magic string did not match.
    BadMagic,
    /// Version field is not one this build can read.
    UnsupportedVersion(u16),
    /// Manifest is internally inconsistent (bad offsets, bad name bytes, ...).
    CorruptHeader(String),
    /// File ends before the payload an entry points at.
    Truncated { expected: u64, actual: u64 },
    /// Stored entry does not match the shape the model config requires.
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    /// An entry required by the model config is absent from the file.
    MissingEntry(String),
}

/// Dataset-integrity failures.
#[derive(Debug)]
pub enum DatasetError {
    MalformedImage { path: PathBuf, reason: String },
    /// groundtruth.txt line count does not match the number of frames.
    BoxCountMismatch { frames: usize, boxes: usize },
    MissingFile(PathBuf),
    Empty(PathBuf),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: shape mismatch between {lhs:?} and {rhs:?}")
            }
            Error::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            Error::NonFinite(ctx) => write!(f, "non-finite value: {ctx}"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Checkpoint(e) => write!(f, "checkpoint error: {e}"),
            Error::Dataset(e) => write!(f, "dataset error: {e}"),
            Error::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl fmt::Display for CheckpointError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CheckpointError::BadMagic => write!(f, "bad magic string"),
            CheckpointError::UnsupportedVersion(v) => write!(f, "unsupported version {v}"),
            CheckpointError::CorruptHeader(msg) => write!(f, "corrupt header: {msg}"),
            CheckpointError::Truncated { expected, actual } => {
                write!(f, "truncated payload: need {expected} bytes, file has {actual}")
            }
            CheckpointError::ShapeMismatch {
                name,
                expected,
                actual,
            } => write!(
                f,
                "entry `{name}`: config expects shape {expected:?}, file has {actual:?}"
            ),
            CheckpointError::MissingEntry(name) => write!(f, "entry `{name}` missing from file"),
        }
    }
}

impl fmt::Display for DatasetError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DatasetError::MalformedImage { path, reason } => {
                write!(f, "malformed image {}: {reason}", path.display())
            }
            DatasetError::BoxCountMismatch { frames, boxes } => {
                write!(f, "{frames} frames but {boxes} ground-truth boxes")
            }
            DatasetError::MissingFile(path) => write!(f, "missing file {}", path.display()),
            DatasetError::Empty(path) => write!(f, "dataset at {} is empty", path.display()),
        }
    }
}

impl std::error::Error for Error {}
impl std::error::Error for CheckpointError {}
impl std::error::Error for DatasetError {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

impl From<CheckpointError> for Error {
    fn from(e: CheckpointError) -> Self {
        Error::Checkpoint(e)
    }
}

impl From<DatasetError> for Error {
    fn from(e: DatasetError) -> Self {
        Error::Dataset(e)
    }
}
