use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the editing and reconstruction stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {op} got shapes {left:?} and {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("argument error: {0}")]
    Argument(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("training error at step {step}: {reason}")]
    Training { step: usize, reason: String },

    #[error("inference error: {0}")]
    Inference(String),

    #[error("perception error: {0}")]
    Perception(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("parse error at byte {offset}: {reason}")]
    Parse { offset: usize, reason: String },

    #[error("pipeline stage `{stage}` failed: {source}")]
    Pipeline {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn stage(stage: &'static str) -> impl FnOnce(Error) -> Error {
        move |source| Error::Pipeline {
            stage,
            source: Box::new(source),
        }
    }
}
