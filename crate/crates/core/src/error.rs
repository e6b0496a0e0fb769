use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes, dimensions or indices that do not fit together.
    #[error("structural error: {0}")]
    Structural(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    /// The first trial already tracks the reference perfectly, so the
    /// normalized error norm has nothing to normalize by.
    #[error("degenerate normalization: first-trial error norm is zero")]
    DegenerateNormalization,

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("{what} diverged at sample {sample}")]
    Divergence { what: String, sample: usize },

    #[error("matrix not positive definite in {context} (jitter tried: {jitter:?})")]
    Conditioning { context: String, jitter: Vec<f64> },

    #[error("input variance calibration failed: no excitation after {doublings} doublings (last variance {last_variance:e})")]
    Calibration { doublings: usize, last_variance: f64 },

    #[error("degenerate weights: {0}")]
    DegenerateWeights(String),

    #[error("trial {}: {source}", trial + 1)]
    Trial {
        trial: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("state variable {state}: {source}")]
    StateModel {
        state: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("usage: {0}")]
    Usage(String),

    #[error("config line {line}: {message}")]
    ConfigParse { line: usize, message: String },

    #[error("unknown config key `{0}`")]
    UnknownKey(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn in_trial(self, trial: usize) -> Self {
        match self {
            e @ Error::Trial { .. } => e,
            e => Error::Trial {
                trial,
                source: Box::new(e),
            },
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
