use detr3d_autograd::{CheckpointError, TensorError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DetrError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Format(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("depth frame has no valid pixels")]
    EmptyCloud,
    #[error("scene generator gave up after {attempts} placements; try smaller objects or fewer per scene")]
    Placement { attempts: usize },
    #[error("non-finite value produced by {op} ({context})")]
    NonFinite { op: &'static str, context: String },
}

impl DetrError {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        DetrError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, DetrError>;
