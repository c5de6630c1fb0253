use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("insufficient keypoints: found {found}, need {required}")]
    InsufficientKeypoints { found: usize, required: usize },

    #[error("degenerate ray: cosine {cosine} to the plane normal is too small")]
    DegenerateRay { cosine: f64 },

    #[error("transferred point is behind the camera (z = {z})")]
    BehindCamera { z: f64 },

    #[error("tracking diverged: {0}")]
    TrackingDiverged(String),

    #[error("no keyframes to optimize")]
    NoKeyframes,

    #[error("insufficient associated pose pairs: found {found}, need at least 2")]
    InsufficientPairs { found: usize },

    #[error("{}: not found", path.display())]
    MissingFile { path: PathBuf },

    #[error("no rgb/depth pairs associated within {tolerance} s")]
    NoAssociations { tolerance: f64 },

    #[error("{}:{line}: {message}", path.display())]
    MalformedLine {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("scene visibility check failed: {0}")]
    Visibility(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {source}", path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
