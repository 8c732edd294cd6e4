use std::path::PathBuf;

/// Errors produced anywhere in the audit toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: parse error: {msg}")]
    Parse { line: usize, msg: String },

    #[error("line {line}: dimension mismatch in record '{id}': {msg}")]
    DimensionMismatch {
        line: usize,
        id: String,
        msg: String,
    },

    #[error("line {line}: duplicate record id '{id}'")]
    DuplicateId { line: usize, id: String },

    #[error("invalid record '{id}': {msg}")]
    InvalidRecord { id: String, msg: String },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },

    #[error("missing label on record '{0}'")]
    MissingLabel(String),

    #[error("no agreeing records: sigma is undefined under the exclude policy")]
    NoAgreement,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("unknown {kind} '{name}'")]
    Unknown { kind: &'static str, name: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
