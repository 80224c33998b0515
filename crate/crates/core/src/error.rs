use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("invalid mesh: {0}")]
    InvalidMesh(String),

    #[error("topology mismatch: {0}")]
    TopologyMismatch(String),

    #[error("index {index} out of range for {len} vertices")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("size mismatch: expected {expected}, got {got} ({what})")]
    SizeMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("degenerate projection: {0}")]
    DegenerateProjection(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("rank deficient: achieved rank {achieved}, need {required}")]
    RankDeficient { achieved: usize, required: usize },

    #[error("empty domain: no {0} samples")]
    EmptyDomain(&'static str),

    #[error("training diverged at epoch {epoch}: total loss {loss}")]
    Divergence { epoch: usize, loss: f64 },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },

    #[error("unsupported format version {0}")]
    VersionMismatch(u32),

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("malformed header: {0}")]
    Header(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn size(what: &'static str, expected: usize, got: usize) -> Self {
        Error::SizeMismatch {
            what,
            expected,
            got,
        }
    }
}
