use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}:{line}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("point cloud is empty")]
    EmptyCloud,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("duplicate manifest entry for subject {subject} scan {scan}")]
    DuplicateEntry { subject: String, scan: u8 },

    #[error("scan id {0} is outside 1..=16")]
    ScanIdRange(i64),

    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),

    #[error("degenerate point cloud: {0}")]
    Degenerate(String),

    #[error("point cloud does not overlap the grid")]
    OutsideGrid,

    #[error("triangulation impossible: {0}")]
    Triangulation(String),

    #[error("range image has no valid pixels")]
    NoValidPixels,

    #[error("filter size {size} does not fit in a {width}x{height} image")]
    FilterTooLarge {
        size: usize,
        width: usize,
        height: usize,
    },

    #[error("coordinate ({u}, {v}) is outside a {width}x{height} image")]
    OutOfBounds {
        u: f64,
        v: f64,
        width: usize,
        height: usize,
    },

    #[error("subject {subject} has no scan {scan}")]
    MissingScan { subject: String, scan: u8 },

    #[error("bad file format in {}: {message}", path.display())]
    Format { path: PathBuf, message: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}
