use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid axis {axis} for tensor of rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("tape already consumed by a backward pass")]
    TapeConsumed,

    #[error("expected a scalar output, got shape {0:?}")]
    NonScalar(Vec<usize>),

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("image `{image_id}` is {width}x{height}, smaller than patch size {k}")]
    ImageTooSmall {
        image_id: String,
        width: usize,
        height: usize,
        k: usize,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("manifest {path}: {detail}")]
    Manifest { path: PathBuf, detail: String },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("{count} patch file(s) missing, first: {first}")]
    MissingPatches { count: usize, first: PathBuf },

    #[error("split leakage: image(s) {0:?} appear in both train and test patches")]
    Leakage(Vec<String>),

    #[error("gradient check failed: max relative error {max_error:e} exceeds tolerance {tolerance:e}")]
    GradCheckFailed { max_error: f64, tolerance: f64 },

    #[error("report {path}: {detail}")]
    Report { path: PathBuf, detail: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 1 usage, 2 data, 3 verification failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_) | Error::Config(_) => 1,
            Error::Leakage(_) | Error::GradCheckFailed { .. } => 3,
            _ => 2,
        }
    }
}
