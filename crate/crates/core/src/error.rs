use std::path::PathBuf;

/// Errors raised by model, ADMM, pruning and pipeline operations.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("structural error: {0}")]
    Structural(String),

    #[error("dimension mismatch: expected {expected:?}, got {actual:?}")]
    Dimension { expected: Vec<usize>, actual: Vec<usize> },

    #[error("unknown layer `{0}`")]
    Lookup(String),

    #[error("non-finite value in layer `{layer}`: {detail}")]
    Numeric { layer: String, detail: String },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("invalid sparsity spec: {0}")]
    Spec(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("checkpoint integrity error: {0}")]
    Integrity(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Tags an error with the pipeline stage it came from.
    pub fn in_stage(self, stage: &str) -> Self {
        match self {
            Error::Stage { .. } => self,
            other => Error::Stage { stage: stage.to_string(), source: Box::new(other) },
        }
    }

    /// Short machine-readable kind name.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Structural(_) => "structural",
            Error::Dimension { .. } => "dimension",
            Error::Lookup(_) => "lookup",
            Error::Numeric { .. } => "numeric",
            Error::Usage(_) => "usage",
            Error::Spec(_) => "spec",
            Error::Config(_) => "config",
            Error::Integrity(_) => "integrity",
            Error::Stage { source, .. } => source.kind(),
            Error::Io { .. } => "io",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
