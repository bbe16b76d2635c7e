use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at node {node} ({op}): {reason}")]
    Shape {
        node: usize,
        op: &'static str,
        reason: String,
    },

    #[error("missing binding `{name}` for node {node}")]
    MissingBinding { node: usize, name: String },

    #[error("loss output must be scalar, node {node} has shape {shape:?}")]
    NonScalarLoss { node: usize, shape: Vec<usize> },

    #[error("degenerate embedding: norm {norm:e} at or below threshold (row {row})")]
    DegenerateEmbedding { row: usize, norm: f64 },

    #[error("non-finite value produced at node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },

    #[error("invalid argument `{arg}`: {reason}")]
    InvalidArgument { arg: &'static str, reason: String },

    #[error("training aborted: {0}")]
    NumericalAbort(Box<AbortSnapshot>),

    #[error("malformed file {path:?}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// State captured when training hits a non-finite value.
#[derive(Clone, Debug, PartialEq)]
pub struct AbortSnapshot {
    pub epoch: usize,
    pub batch: usize,
    pub lr: f64,
    pub cause: String,
    pub param_norms: Vec<(String, f64)>,
}

impl std::fmt::Display for AbortSnapshot {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "epoch {} batch {} lr {:e}: {}; parameter norms",
            self.epoch, self.batch, self.lr, self.cause
        )?;
        for (name, norm) in &self.param_norms {
            write!(f, " {name}={norm:e}")?;
        }
        Ok(())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(arg: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidArgument {
        arg,
        reason: reason.into(),
    }
}
