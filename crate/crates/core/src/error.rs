use std::path::PathBuf;

use coevo_autodiff::AutodiffError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoevoError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("token {token} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },
    #[error("non-finite {what} at step {step}")]
    NonFinite { what: String, step: u64 },
    #[error("reward channel `{0}` is gradient-opaque")]
    NotDifferentiable(&'static str),
    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },
    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<CoevoError>,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl CoevoError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        CoevoError::InvalidArgument(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CoevoError::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable category, used by the CLI's error line.
    pub fn kind(&self) -> &'static str {
        match self {
            CoevoError::Autodiff(_) => "autodiff",
            CoevoError::InvalidArgument(_) => "invalid_argument",
            CoevoError::TokenOutOfRange { .. } => "token_out_of_range",
            CoevoError::NonFinite { .. } => "non_finite",
            CoevoError::NotDifferentiable(_) => "not_differentiable",
            CoevoError::Config { .. } => "config",
            CoevoError::Checkpoint { .. } => "checkpoint",
            CoevoError::Stage { source, .. } => source.kind(),
            CoevoError::Io { .. } => "io",
            CoevoError::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, CoevoError>;

pub(crate) trait StageContext<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageContext<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| CoevoError::Stage {
            stage,
            source: Box::new(e),
        })
    }
}
