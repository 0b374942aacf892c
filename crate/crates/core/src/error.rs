use std::path::PathBuf;

use thiserror::Error;

use crate::sparse::VoxelCoord;

pub type Result<T, E = ScanError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum ScanError {
    #[error("voxel coordinate {0:?} outside the packable range [-2^20, 2^20 - 1]")]
    CoordOutOfRange(VoxelCoord),

    #[error("duplicate voxel coordinate {0:?}")]
    DuplicateCoord(VoxelCoord),

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("scale error: {0}")]
    Scale(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("{path}: format error at byte {offset}: {msg}")]
    Format {
        path: PathBuf,
        offset: u64,
        msg: String,
    },

    #[error(transparent)]
    WeightFile(#[from] WeightFileError),

    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Failures when decoding a named-tensor weight file.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum WeightFileError {
    #[error("bad magic: expected SCANWT01")]
    BadMagic,
    #[error("duplicate tensor name {0:?}")]
    DuplicateName(String),
    #[error("truncated payload at byte {0}")]
    Truncated(u64),
    #[error("tensor name at byte {0} is not valid UTF-8")]
    BadName(u64),
    #[error("{0} trailing bytes after the last tensor")]
    TrailingBytes(u64),
    #[error("missing tensor {0:?}")]
    Missing(String),
    #[error("tensor {name:?} has shape {found:?}, expected {expected:?}")]
    BadShape {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },
}

impl WeightFileError {
    /// Stable numeric code, used as the CLI exit status for weight failures.
    pub fn code(&self) -> i32 {
        match self {
            WeightFileError::BadMagic => 10,
            WeightFileError::DuplicateName(_) => 11,
            WeightFileError::Truncated(_) => 12,
            WeightFileError::BadName(_) => 13,
            WeightFileError::TrailingBytes(_) => 14,
            WeightFileError::Missing(_) => 15,
            WeightFileError::BadShape { .. } => 16,
        }
    }
}
