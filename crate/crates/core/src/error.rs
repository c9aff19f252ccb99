use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("point has non-positive depth z = {0}")]
    DegenerateDepth(f64),
    #[error("disparity {0} is not a valid observation")]
    InvalidDisparity(f64),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("sample point ({x}, {y}) outside {width}x{height} map")]
    OutOfBounds {
        x: f64,
        y: f64,
        width: usize,
        height: usize,
    },
    #[error("degenerate alignment geometry: {0}")]
    DegenerateGeometry(String),
    #[error("degenerate alignment gradient: {0}")]
    DegenerateGradient(String),
    #[error("localization failure: consensus of {inliers} below {required}")]
    LocalizationFailure { inliers: usize, required: usize },
    #[error("insufficient matches: {0} (need at least 3)")]
    InsufficientMatches(usize),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid viewpoint: {0}")]
    InvalidViewpoint(String),
    #[error("teach failure on frame {frame}: {reason}")]
    TeachFailure { frame: usize, reason: String },
    #[error("malformed data in {path}: {reason}")]
    Data { path: PathBuf, reason: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn data(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Data {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
