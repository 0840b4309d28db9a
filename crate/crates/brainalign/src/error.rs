//! Error types shared across the crate.

use std::fmt;
use std::path::PathBuf;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// All failure modes surfaced by the library.
///
/// Numeric trouble (NaN/Inf, domain violations, degenerate inputs) is never
/// propagated silently: every op validates its output and reports here.
#[derive(Debug)]
pub enum Error {
    /// Tensor dimensions do not line up for the requested operation.
    Shape { op: String, detail: String },
    /// Domain violation or non-finite value in a numeric kernel.
    Numeric { op: String, detail: String },
    /// The Jacobi SVD sweep limit was exhausted before convergence.
    SvdConvergence { sweeps: usize },
    /// Invalid configuration value.
    Config { detail: String },
    /// A documented operation precondition was violated by the caller.
    Precondition { op: String, detail: String },
    /// Filesystem failure, tagged with the path involved.
    Io { path: PathBuf, source: std::io::Error },
    /// Malformed tensor file: names the offending field and byte offset.
    Format {
        path: PathBuf,
        field: &'static str,
        offset: u64,
        detail: String,
    },
    /// Checkpoint manifest names a parameter with no backing file.
    MissingParam { name: String },
    /// Training aborted, with epoch/batch context.
    Training {
        epoch: usize,
        batch: usize,
        detail: String,
    },
}

impl Error {
    pub(crate) fn shape(op: &str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op: op.to_string(),
            detail: detail.into(),
        }
    }

    pub(crate) fn numeric(op: &str, detail: impl Into<String>) -> Self {
        Error::Numeric {
            op: op.to_string(),
            detail: detail.into(),
        }
    }

    pub(crate) fn config(detail: impl Into<String>) -> Self {
        Error::Config {
            detail: detail.into(),
        }
    }

    pub(crate) fn precondition(op: &str, detail: impl Into<String>) -> Self {
        Error::Precondition {
            op: op.to_string(),
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, detail } => write!(f, "{op}: shape error: {detail}"),
            Error::Numeric { op, detail } => write!(f, "{op}: numeric error: {detail}"),
            Error::SvdConvergence { sweeps } => {
                write!(f, "svd: no convergence after {sweeps} Jacobi sweeps")
            }
            Error::Config { detail } => write!(f, "config error: {detail}"),
            Error::Precondition { op, detail } => {
                write!(f, "{op}: precondition violated: {detail}")
            }
            Error::Io { path, source } => write!(f, "i/o error at {}: {source}", path.display()),
            Error::Format {
                path,
                field,
                offset,
                detail,
            } => write!(
                f,
                "bad tensor file {}: field `{field}` at byte {offset}: {detail}",
                path.display()
            ),
            Error::MissingParam { name } => {
                write!(f, "checkpoint is missing parameter `{name}`")
            }
            Error::Training {
                epoch,
                batch,
                detail,
            } => write!(f, "training aborted at epoch {epoch}, batch {batch}: {detail}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}
