use std::path::PathBuf;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("degenerate vector: norm {norm:e} is below {eps:e}")]
    DegenerateVector { norm: f64, eps: f64 },

    #[error("numeric error: non-finite value produced by {0}")]
    NonFinite(String),

    #[error("label error: {0}")]
    Label(String),

    #[error("batch construction error: {0}")]
    BatchConstruction(String),

    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    #[error("ingestion error in {}: {reason}", path.display())]
    Ingestion { path: PathBuf, reason: String },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("shape mismatch for parameter `{name}`: expected {expected:?}, found {found:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("missing checkpoint: {}", .0.display())]
    MissingCheckpoint(PathBuf),

    #[error("contract violation: {0}")]
    ContractViolation(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("Cohen's kappa is undefined when expected agreement equals 1")]
    UndefinedKappa,

    #[error("training diverged at {context}: {source}")]
    Diverged {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    /// True for failures caused by NaN/Inf or collapsed vectors.
    pub fn is_numeric(&self) -> bool {
        match self {
            Error::NonFinite(_) | Error::DegenerateVector { .. } => true,
            Error::Diverged { .. } => true,
            _ => false,
        }
    }
}
