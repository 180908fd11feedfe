use std::path::PathBuf;

/// Errors raised across the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dataset is empty")]
    EmptyDataset,

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: parse error at byte {offset}: {msg}")]
    Parse {
        path: PathBuf,
        offset: usize,
        msg: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: invalid JSON: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("non-finite value in state component `{component}`")]
    NonFinite { component: &'static str },

    #[error("non-finite gradient in `{layer}`")]
    NonFiniteGradient { layer: String },

    #[error("singular least-squares system: {0}")]
    Singular(String),

    #[error("eigenvalue computation failed: {0}")]
    Eigen(String),

    #[error("QP solver exceeded {iterations} iterations (last KKT residual {residual:e})")]
    QpIterationCap { iterations: usize, residual: f64 },

    #[error("QP is not strictly convex")]
    QpNotConvex,
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
