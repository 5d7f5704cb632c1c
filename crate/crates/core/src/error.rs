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

    #[error("bad magic bytes {found:?}, expected \"MS3T\"")]
    BadMagic { found: [u8; 4] },

    #[error("unsupported format version {found}, expected {expected}")]
    VersionMismatch { found: u16, expected: u16 },

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("label grid shape {labels:?} does not match data shape {data:?}")]
    LabelShape {
        data: [usize; 3],
        labels: [usize; 3],
    },

    #[error("label value {value} out of range for {classes} classes")]
    LabelRange { value: usize, classes: usize },

    #[error("invalid volume: {0}")]
    InvalidVolume(String),

    #[error("invalid phantom spec `{name}`: {reason}")]
    InvalidSpec { name: String, reason: String },

    #[error("could not place {num_teeth} teeth in a {dims:?} volume for spec `{name}` after {attempts} attempts")]
    Placement {
        name: String,
        num_teeth: usize,
        dims: [usize; 3],
        attempts: usize,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("volume dims {dims:?} must be divisible by {divisor}{hint}")]
    Indivisible {
        dims: [usize; 3],
        divisor: usize,
        hint: &'static str,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("histograms use different binning: {0}")]
    Binning(String),

    #[error("non-finite loss `{name}` = {value} at step {step}")]
    NonFinite {
        name: &'static str,
        value: f64,
        step: u64,
    },

    #[error("batch mismatch: {0}")]
    Batch(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("missing file: {0}")]
    Missing(PathBuf),

    #[error("output directory {0} is not empty (use --force to overwrite)")]
    OutputExists(PathBuf),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("json error on {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    /// Process exit code: 2 usage, 3 data, 4 training abort.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_) => 2,
            Error::NonFinite { .. } | Error::Batch(_) | Error::Checkpoint(_) => 4,
            _ => 3,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}
