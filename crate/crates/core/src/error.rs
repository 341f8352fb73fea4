//! Error type shared by every module of the crate.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes that do not compose.
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A precondition of an operation was violated.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A node id that does not belong to the tape it was used with.
    #[error("node {0} is not on this tape")]
    Lookup(usize),

    /// Input outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("linear solver failed: {0}")]
    Solver(String),

    #[error("no convergence after {sweeps} sweeps: {what}")]
    Convergence { what: &'static str, sweeps: usize },

    #[error("resource limit: {0}")]
    Resource(String),

    /// Slice weights collapsed below the representable range.
    #[error("degenerate slice {slice}: total weight {total:e}")]
    Degeneracy { slice: usize, total: f64 },

    #[error("training failed: {0}")]
    Training(String),

    /// A persisted tensor or manifest that does not match what the reader expects.
    #[error("load error for `{name}`: {reason}")]
    Load { name: String, reason: String },

    #[error("malformed data: {0}")]
    Format(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
