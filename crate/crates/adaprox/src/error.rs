use thiserror::Error;

/// Errors surfaced by the library.
///
/// `InvalidArgument` and `DimensionMismatch` indicate caller mistakes;
/// `NumericalFailure` and `Divergence` indicate that a run went bad at
/// runtime and carry enough context to report which iteration did it.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("operation requires state that is missing: {0}")]
    MissingState(String),

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("parse error at {path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("unsupported labels {labels:?} in {path} (supported: {supported})")]
    UnsupportedLabels {
        path: String,
        labels: Vec<String>,
        supported: String,
    },

    #[error("non-finite value produced at iteration {iteration}: {detail}")]
    NumericalFailure { iteration: usize, detail: String },

    #[error(
        "objective increased for {iterations} consecutive iterations at iteration {at}; \
         the steplength is likely above 1/L — retry with a smaller alpha"
    )]
    Divergence { at: usize, iterations: usize },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
