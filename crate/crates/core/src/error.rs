use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("point is behind the camera (z = {0:e})")]
    BehindCamera(f64),
    #[error("depth must be positive, got {0}")]
    NonPositiveDepth(f64),
    #[error("intrinsic matrix is not invertible")]
    SingularIntrinsics,
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("invalid depth range: {0}")]
    InvalidRange(String),
    #[error("need at least 2 source views, got {0}")]
    TooFewViews(usize),
    #[error("resolution mismatch: {0}")]
    ResolutionMismatch(String),
    #[error("quaternion norm is zero")]
    ZeroQuaternion,
    #[error("image too small for the metric window: {0}")]
    TooSmall(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("neighbor set is empty")]
    EmptyNeighborSet,
    #[error("cloud/mask alignment mismatch: {0}")]
    AlignmentMismatch(String),
    #[error("gaussian cloud is empty")]
    EmptyCloud,
    #[error("no training views supplied")]
    NoViews,
    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),
    #[error("malformed PLY header: {0}")]
    MalformedHeader(String),
    #[error("truncated PLY body: {0}")]
    TruncatedBody(String),
    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),
    #[error("malformed file {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("mismatch: {0}")]
    Mismatch(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True when the error stems from bad user input rather than a bug.
    pub fn is_user_error(&self) -> bool {
        !matches!(self, Error::ShapeMismatch(_))
    }
}
