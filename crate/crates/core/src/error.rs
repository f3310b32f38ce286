use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("malformed file {path}: {reason}")]
    MalformedFile { path: PathBuf, reason: String },

    #[error("unsupported layout in {path}: {reason}")]
    UnsupportedLayout { path: PathBuf, reason: String },

    #[error("unsupported LAS version {major}.{minor} in {path}")]
    UnsupportedVersion { path: PathBuf, major: u8, minor: u8 },

    #[error("i/o failure on {path}: {source}")]
    IoFailure {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed catalog at line {line}: {reason}")]
    MalformedCatalog { line: usize, reason: String },

    #[error("fetch of {id} failed after {attempts} attempts: {reason}")]
    FetchFailure {
        id: String,
        attempts: u32,
        reason: String,
    },

    #[error("bounding box has zero area")]
    EmptyExtent,

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("point cloud {0} has no ground points")]
    NoGroundPoints(PathBuf),

    #[error("no input tiles")]
    EmptyInput,

    #[error("cell size mismatch: expected {expected}, found {found}")]
    CellSizeMismatch { expected: f64, found: f64 },

    #[error("requested extent does not overlap the grid")]
    DisjointExtent,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("alignment mismatch: {0}")]
    AlignmentMismatch(String),

    #[error("target grid extends past the source raster: {0}")]
    CoverageGap(String),

    #[error("need at least 3 timestamps, found {found}")]
    InsufficientTimestamps { found: usize },

    #[error("timestamp {year} is not before target year {target_year}")]
    NonCausalTimestamp { year: f64, target_year: f64 },

    #[error("mask selects no pixels")]
    EmptyMask,

    #[error("config error at `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("stage `{stage}` failed: {source}")]
    StageFailure {
        stage: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::IoFailure {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn malformed(path: impl Into<PathBuf>, reason: impl ToString) -> Self {
        Error::MalformedFile {
            path: path.into(),
            reason: reason.to_string(),
        }
    }

    pub(crate) fn unsupported(path: impl Into<PathBuf>, reason: impl ToString) -> Self {
        Error::UnsupportedLayout {
            path: path.into(),
            reason: reason.to_string(),
        }
    }

    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    /// Short machine-friendly name of the variant, used in logs and run summaries.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "InvalidArgument",
            Error::MalformedFile { .. } => "MalformedFile",
            Error::UnsupportedLayout { .. } => "UnsupportedLayout",
            Error::UnsupportedVersion { .. } => "UnsupportedVersion",
            Error::IoFailure { .. } => "IoFailure",
            Error::MalformedCatalog { .. } => "MalformedCatalog",
            Error::FetchFailure { .. } => "FetchFailure",
            Error::EmptyExtent => "EmptyExtent",
            Error::GridMismatch(_) => "GridMismatch",
            Error::NoGroundPoints(_) => "NoGroundPoints",
            Error::EmptyInput => "EmptyInput",
            Error::CellSizeMismatch { .. } => "CellSizeMismatch",
            Error::DisjointExtent => "DisjointExtent",
            Error::ShapeMismatch(_) => "ShapeMismatch",
            Error::AlignmentMismatch(_) => "AlignmentMismatch",
            Error::CoverageGap(_) => "CoverageGap",
            Error::InsufficientTimestamps { .. } => "InsufficientTimestamps",
            Error::NonCausalTimestamp { .. } => "NonCausalTimestamp",
            Error::EmptyMask => "EmptyMask",
            Error::Config { .. } => "ConfigError",
            Error::StageFailure { .. } => "StageFailure",
        }
    }
}
