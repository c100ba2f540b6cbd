use std::path::PathBuf;

use thiserror::Error;
use vapp_numcore::NumError;

#[derive(Debug, Error)]
pub enum VapError {
    #[error(transparent)]
    Num(#[from] NumError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("format error: {0}")]
    Format(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("window error: {0}")]
    Window(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("alignment error: channel lengths {0} and {1} differ")]
    Alignment(usize, usize),
    #[error("generation error: {0}")]
    Generation(String),
    #[error("stats error: {0}")]
    Stats(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("evaluation error: {0}")]
    Evaluation(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("transport error: {0}")]
    Transport(String),
}

impl VapError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// IO and network failures, as opposed to bad inputs.
    pub fn is_io(&self) -> bool {
        matches!(self, Self::Io { .. } | Self::Transport(_))
    }
}

pub type Result<T> = std::result::Result<T, VapError>;
