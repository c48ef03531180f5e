use std::fmt;

/// Errors raised anywhere in the library.
///
/// The variants map onto the CLI exit codes: `Config` → 2, `Data`/`Format` → 3,
/// `Checkpoint` → 4. `Usage` and `Numeric` are programming or runtime faults.
#[derive(Debug)]
pub enum Error {
    /// Inconsistent shapes or invalid configuration values.
    Config(String),
    /// An API was called with arguments outside its contract.
    Usage(String),
    /// A non-finite value appeared in the output of `op`.
    Numeric { op: &'static str },
    /// A dataset file did not match its declared layout.
    Format(String),
    /// A checkpoint could not be read or does not fit the model.
    Checkpoint(String),
    Io(std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Self::Config(msg.into())
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        Self::Usage(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Self::Format(msg.into())
    }

    pub fn checkpoint(msg: impl Into<String>) -> Self {
        Self::Checkpoint(msg.into())
    }

    pub(crate) fn shape_mismatch(what: &str, a: &[usize], b: &[usize]) -> Self {
        Self::Config(format!("{what}: shape {a:?} is incompatible with {b:?}"))
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Config(msg) => write!(f, "configuration error: {msg}"),
            Self::Usage(msg) => write!(f, "usage error: {msg}"),
            Self::Numeric { op } => write!(f, "numeric error: non-finite output from `{op}`"),
            Self::Format(msg) => write!(f, "format error: {msg}"),
            Self::Checkpoint(msg) => write!(f, "checkpoint error: {msg}"),
            Self::Io(err) => write!(f, "i/o error: {err}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Self::Io(err) => Some(err),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Self::Io(err)
    }
}
