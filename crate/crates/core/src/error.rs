use std::path::PathBuf;

use ehr_autodiff::AutodiffError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("invalid dataset: {0}")]
    Dataset(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("no patient contains disease {0}")]
    NoSupport(usize),
    #[error("pre-trained state must be frozen before extracting features")]
    NotFrozen,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("dimension mismatch: {what} is {left} in {left_src} but {right} in {right_src}")]
    DimensionMismatch {
        what: &'static str,
        left: usize,
        left_src: &'static str,
        right: usize,
        right_src: &'static str,
    },
    #[error("power iteration on the transition matrix did not converge")]
    NotConvergent,
    #[error("computation failed: {0}")]
    Computation(String),
    #[error("history: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether the error stems from bad input or configuration rather than
    /// from a failure during computation.
    pub fn is_input_error(&self) -> bool {
        !matches!(self, Error::Autodiff(_) | Error::Computation(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
