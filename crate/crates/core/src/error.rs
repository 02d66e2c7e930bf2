use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid box {0:?}: need finite corners with x1 < x2 and y1 < y2")]
    InvalidBox([f64; 4]),

    #[error("box {0:?} is degenerate after clipping to the feature grid")]
    DegenerateRoi([f64; 4]),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("cannot assign {shots} strong images to every class: {reason}")]
    InfeasibleShots { shots: usize, reason: String },

    #[error("non-finite gradient in tensor `{0}`")]
    NonFiniteGradient(String),

    #[error("non-finite loss at epoch {epoch}, iteration {iteration}: {detail}")]
    NonFiniteLoss { epoch: usize, iteration: usize, detail: String },

    #[error("no semi-strong entry for sampled image {0}")]
    MissingSemiStrong(usize),

    #[error("{path}: expected {expected} format version {want}, found {found}")]
    SchemaVersion { path: PathBuf, expected: &'static str, want: u32, found: String },

    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
