use std::path::PathBuf;

/// Errors raised anywhere in the library.
///
/// The CLI maps [`Error::is_validation`] errors to exit code 1 and everything
/// else to exit code 2.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("degenerate batch: batch normalization needs at least 2 tokens in training mode")]
    DegenerateBatch,

    #[error("input error: {0}")]
    Input(String),

    #[error("range error: {0}")]
    Range(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("plan error: {0}")]
    Plan(String),

    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("empty supervision: every label is ignored")]
    EmptySupervision,

    #[error("analytics error: {0}")]
    Analytics(String),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input (config keys, file contents,
    /// plan parameters) rather than failures during a run.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Format(_) | Error::Plan(_) | Error::Io { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
