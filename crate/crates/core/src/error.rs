use thiserror::Error;

/// Errors surfaced by every module of the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("contract error: {0}")]
    Contract(String),

    #[error("stale graph: backward already ran, rebuild the forward pass first")]
    StaleGraph,

    #[error("non-finite value produced by {op} (node {node})")]
    NonFinite { op: &'static str, node: usize },

    #[error("objective is not deterministic: {first} then {second}")]
    Determinism { first: f64, second: f64 },

    #[error("format error in {path}: {msg}")]
    Format { path: String, msg: String },

    #[error("generation error: {0}")]
    Generation(String),

    #[error("training diverged in stage {stage}, epoch {epoch}: {term} = {value}")]
    Divergence {
        stage: String,
        epoch: usize,
        term: &'static str,
        value: f64,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn format(path: impl std::fmt::Display, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.to_string(),
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
