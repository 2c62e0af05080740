use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("non-finite value at position {0}")]
    NonFinite(usize),

    #[error("every point in subspace {subspace} is degenerate (zero norm); nothing to cluster")]
    AllDegenerate { subspace: usize },

    #[error("input stream exhausted at decode step {step}")]
    StreamExhausted { step: usize },

    #[error(transparent)]
    Load(#[from] LoadError),

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub(crate) fn in_file(self, path: impl Into<PathBuf>) -> Self {
        Error::File {
            path: path.into(),
            source: Box::new(self),
        }
    }

    /// The innermost error, with file context stripped.
    pub fn root(&self) -> &Error {
        match self {
            Error::File { source, .. } => source.root(),
            other => other,
        }
    }
}

/// Failures while decoding a binary index or embedding dump.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum LoadError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {found} (this build reads version {supported})")]
    Version { found: u16, supported: u16 },

    #[error("truncated input at byte offset {offset}: needed {needed} more bytes")]
    Truncated { offset: usize, needed: usize },

    #[error("{trailing} unexpected trailing bytes after offset {offset}")]
    TrailingBytes { offset: usize, trailing: usize },

    #[error("invalid header field at byte offset {offset}: {reason}")]
    Header { offset: usize, reason: String },

    #[error("invariant violated in loaded data at byte offset {offset}: {reason}")]
    Invariant { offset: usize, reason: String },
}
