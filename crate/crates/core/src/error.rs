use std::path::PathBuf;

/// Errors produced by the estimation, fusion and I/O layers.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Point does not project: it lies on or behind the camera plane.
    #[error("point behind camera (z = {z})")]
    BehindCamera { z: f64 },

    /// Plane hypothesis passes through the camera center, no homography exists.
    #[error("degenerate plane hypothesis (|n\u{b7}X| = {value:.3e})")]
    DegeneratePlane { value: f64 },

    /// Normal is parallel to the optical axis, its image azimuth is undefined.
    #[error("image azimuth undefined: normal parallel to optical axis")]
    UndefinedAzimuth,

    /// Binary file did not parse; `offset` is the byte position of the problem.
    #[error("{path}: {message} at byte {offset}")]
    Format {
        path: PathBuf,
        offset: usize,
        message: String,
    },

    /// Text file did not parse; `line` is 1-based.
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
