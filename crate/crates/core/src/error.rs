use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes cannot be combined by the named operation.
    #[error("{op}: dimension mismatch on {axes}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        axes: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: buffer of {got} scalars does not fill shape {shape:?} ({expected} scalars)")]
    BufferLength {
        op: &'static str,
        shape: [usize; 4],
        expected: usize,
        got: usize,
    },

    #[error("reduction over an empty axis")]
    EmptyReduction,

    #[error("attention over an empty context (zero keys)")]
    EmptyContext,

    #[error("logit tile contains NaN at flat index {index}")]
    PoisonedLogit { index: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("memory instrumentation: {0}")]
    Instrumentation(String),

    #[error("weight file format error in `{field}`: {detail}")]
    Format { field: String, detail: String },

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("normalization is degenerate: every RMSE is zero")]
    DegenerateNormalization,

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: line {line}: {detail}", path.display())]
    Parse { path: PathBuf, line: u64, detail: String },

    #[error("{}: {source}", path.display())]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn csv(path: impl Into<PathBuf>, source: csv::Error) -> Self {
        Error::Csv {
            path: path.into(),
            source,
        }
    }
}
