use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Binary payload problem, located by byte offset.
    #[error("{}: {message} at byte offset {offset}", path.display())]
    Format {
        path: PathBuf,
        offset: u64,
        message: String,
    },

    /// Text file problem, located by 1-based line number (the header is line 1).
    #[error("{}:{line}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid task: {0}")]
    InvalidTask(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),

    #[error("matrix is not positive definite")]
    NotPositiveDefinite,

    #[error(
        "graphical lasso did not converge after {sweeps} sweeps \
         (last change {last_change:e}, KKT residual {kkt_residual:e})"
    )]
    GlassoNotConverged {
        sweeps: usize,
        last_change: f64,
        kkt_residual: f64,
    },

    #[error("non-finite logit at sample {sample}, class {class}")]
    NonFiniteLogit { sample: usize, class: usize },

    #[error("class {class}: {source}")]
    Class {
        class: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the numerical routines, as opposed to bad input data.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::NotSymmetric(_)
            | Error::NotPositiveDefinite
            | Error::GlassoNotConverged { .. }
            | Error::NonFiniteLogit { .. } => true,
            Error::Class { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}
