use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Error taxonomy for the whole engine.
///
/// `Config` errors always carry the machine-readable name of the violated
/// invariant so callers (and tests) can match on it without parsing prose.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes disagree; names the op and both shapes.
    #[error("dimension error in {op}: {details}")]
    Dim { op: &'static str, details: String },

    /// A structural precondition of a configuration was violated.
    #[error("config invariant violated: {name} ({details})")]
    Config { name: &'static str, details: String },

    /// Input outside the mathematical domain of the op (e.g. non-finite softmax input).
    #[error("domain error in {op}: {details}")]
    Domain { op: &'static str, details: String },

    /// Required runtime state is missing (e.g. batch-norm statistics).
    #[error("state error: {0}")]
    State(String),

    /// Archive header/layout is not the expected format.
    #[error("archive format error: {0}")]
    Format(String),

    /// Archive contents are structurally inconsistent (truncation, bad offsets).
    #[error("archive integrity error: {0}")]
    Integrity(String),

    /// Config file does not match the schema; names the offending key.
    #[error("config schema error: {0}")]
    Schema(String),

    /// API misuse (wrong argument to a runtime entry point).
    #[error("usage error: {0}")]
    Usage(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn dim(op: &'static str, details: impl Into<String>) -> Self {
        Error::Dim { op, details: details.into() }
    }

    pub fn config(name: &'static str, details: impl Into<String>) -> Self {
        Error::Config { name, details: details.into() }
    }

    pub fn domain(op: &'static str, details: impl Into<String>) -> Self {
        Error::Domain { op, details: details.into() }
    }

    /// The invariant name for `Config` errors, if this is one.
    pub fn invariant_name(&self) -> Option<&'static str> {
        match self {
            Error::Config { name, .. } => Some(name),
            _ => None,
        }
    }
}
