use crate::diffcore::DiffError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error("fingerprint mismatch: {0}")]
    Fingerprint(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("training diverged: {0}")]
    NonFiniteLoss(String),
    #[error("missing checkpoint: {0}")]
    MissingCheckpoint(String),
    #[error("not implemented: {0}")]
    NotImplemented(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Short machine-readable category used by the CLI.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Diff(_) | Error::Numerical(_) | Error::NonFiniteLoss(_) => "numerical",
            Error::InvalidArgument(_) => "invalid-argument",
            Error::Format(_) | Error::Parse { .. } => "malformed-input",
            Error::Fingerprint(_) => "fingerprint-mismatch",
            Error::Config(_) => "unreadable-config",
            Error::MissingCheckpoint(_) => "missing-checkpoint",
            Error::NotImplemented(_) => "not-implemented",
            Error::Io(_) => "io",
        }
    }
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
