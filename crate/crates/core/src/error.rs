use thiserror::Error;

pub type Result<T> = std::result::Result<T, WflabError>;

#[derive(Debug, Error)]
pub enum WflabError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("no observations")]
    NoObservations,

    #[error("{0}")]
    Domain(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("size cap exceeded: {0}")]
    CapExceeded(String),

    #[error("malformed file {path}: {reason}")]
    Format { path: String, reason: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<WflabError>,
    },
}

impl WflabError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        WflabError::InvalidParameter(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        WflabError::Shape(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        WflabError::Numerical(msg.into())
    }

    pub fn with_context(self, context: impl Into<String>) -> Self {
        WflabError::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// True for failures that happen inside numerical kernels, as opposed to
    /// bad inputs or configuration.
    pub fn is_numerical(&self) -> bool {
        match self {
            WflabError::Numerical(_) => true,
            WflabError::Context { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}
