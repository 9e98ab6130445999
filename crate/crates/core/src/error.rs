use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch on {axis}: expected {expected}, got {actual}")]
    ShapeMismatch {
        op: &'static str,
        axis: String,
        expected: usize,
        actual: usize,
    },

    #[error("{op}: expected rank {expected}, got rank {actual}")]
    RankMismatch {
        op: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("coordinate {coord:?} lies outside dense shape {shape:?}")]
    CoordOutOfBounds { coord: [u32; 4], shape: [usize; 4] },

    #[error("{what}: parse error at byte {offset}: {msg}")]
    Parse {
        what: &'static str,
        offset: u64,
        msg: String,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("epoch coverage impossible: no file with {attribute} = {value}")]
    MissingGroup { attribute: &'static str, value: String },

    #[error("reading {} at sample start {start}: {msg}", path.display())]
    Loader { path: PathBuf, start: usize, msg: String },

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: u64, loss: f64 },

    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),

    #[error("model mismatch: {0}")]
    ModelMismatch(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, axis: impl Into<String>, expected: usize, actual: usize) -> Self {
        Error::ShapeMismatch {
            op,
            axis: axis.into(),
            expected,
            actual,
        }
    }
}
