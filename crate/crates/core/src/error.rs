use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = PgmaError> = std::result::Result<T, E>;

/// Failure classes surfaced by the library. The CLI maps these onto exit
/// codes through [`PgmaError::exit_code`].
#[derive(Debug, Error)]
pub enum PgmaError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error("non-numeric cell {value:?} at row {row}, column {column}")]
    NonNumeric {
        row: usize,
        column: usize,
        value: String,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("node {node} has a zero-norm embedding row")]
    ZeroNorm { node: usize },

    #[error("non-finite gradient in parameter `{param}`")]
    NonFiniteGradient { param: String },

    #[error("training diverged at epoch {epoch}: validation loss is {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("no successful configuration in grid search")]
    NoSuccessfulConfiguration,
}

impl PgmaError {
    /// Process exit code: 1 = configuration, 2 = data, 3 = numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            PgmaError::Config(_) | PgmaError::Checkpoint(_) => 1,
            PgmaError::Io { .. }
            | PgmaError::Data(_)
            | PgmaError::NonNumeric { .. }
            | PgmaError::Shape(_)
            | PgmaError::ZeroNorm { .. } => 2,
            PgmaError::NonFiniteGradient { .. }
            | PgmaError::Diverged { .. }
            | PgmaError::NoSuccessfulConfiguration => 3,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PgmaError::Io {
            path: path.into(),
            source,
        }
    }
}
