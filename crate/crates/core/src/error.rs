use thiserror::Error;

use crate::container::ContainerError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A named tensor does not have the shape the configuration requires.
    #[error("shape mismatch for `{tensor}`: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        tensor: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid {what}: {reason}")]
    Invalid { what: &'static str, reason: String },

    #[error("empty input: {0}")]
    Empty(&'static str),

    /// Labels outside the class range; carries the first offending voxel indices.
    #[error("{count} label(s) out of range [0, {max}], first at {first:?}")]
    LabelOutOfRange {
        count: usize,
        max: u8,
        first: Vec<[usize; 3]>,
    },

    #[error("missing tensor `{0}`")]
    MissingTensor(String),

    #[error(transparent)]
    Container(#[from] ContainerError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(what: &'static str, reason: impl Into<String>) -> Self {
        Error::Invalid {
            what,
            reason: reason.into(),
        }
    }
}
