use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at node {node} ({op}): {detail}")]
    Shape {
        node: String,
        op: &'static str,
        detail: String,
    },

    #[error("non-finite value produced at node {node} ({op})")]
    NonFinite { node: String, op: &'static str },

    #[error("input `{0}` is not bound")]
    UnboundInput(String),

    #[error("loss node {node} is not scalar (shape {shape:?})")]
    NonScalarLoss { node: String, shape: Vec<usize> },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("rank-deficient design matrix: {0}")]
    RankDeficient(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: malformed json: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("{path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("training diverged at iteration {iteration}: {detail}")]
    Diverged { iteration: u64, detail: String },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable identifier used by the CLI's machine-readable error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::NonFinite { .. } => "non_finite",
            Error::UnboundInput(_) => "unbound_input",
            Error::NonScalarLoss { .. } => "non_scalar_loss",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::RankDeficient(_) => "rank_deficient",
            Error::Io { .. } => "io",
            Error::Json { .. } => "json",
            Error::Format { .. } => "format",
            Error::Diverged { .. } => "diverged",
        }
    }
}
