use std::path::PathBuf;

use thiserror::Error;

use crate::adapter::Adapter;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("loss node must be 1x1, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },

    #[error("node {0} is not part of this graph")]
    UnknownNode(usize),

    #[error("non-finite gradient for parameter {name} at step {step}")]
    NanGradient { name: String, step: usize },

    #[error("training diverged at step {step} (loss = {loss})")]
    Diverged {
        step: usize,
        loss: f64,
        last_good: Box<Adapter>,
    },

    #[error("svd did not converge after {sweeps} sweeps (off-diagonal {residual:e})")]
    NonConvergence { sweeps: usize, residual: f64 },

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: (usize, usize), right: (usize, usize)) -> Self {
        Error::Shape { op, left, right }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// File the error refers to, when there is one.
    pub fn path(&self) -> Option<&std::path::Path> {
        match self {
            Error::Io { path, .. } => Some(path),
            _ => None,
        }
    }

    /// Short machine-readable category used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::NonFinite { .. } => "non_finite",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::NonScalarLoss { .. } => "non_scalar_loss",
            Error::UnknownNode(_) => "unknown_node",
            Error::NanGradient { .. } => "nan_gradient",
            Error::Diverged { .. } => "diverged",
            Error::NonConvergence { .. } => "non_convergence",
            Error::Config(_) => "config",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}
