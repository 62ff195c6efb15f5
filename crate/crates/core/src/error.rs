use std::fmt;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors emitted by the toolkit.
#[derive(Debug)]
pub enum Error {
    /// Tensor shapes are incompatible with the requested operation.
    Dimension(String),
    /// An API contract was violated (e.g. backward on a non-scalar).
    Contract(String),
    /// Invalid configuration value or unknown preset.
    Config(String),
    /// A computation produced or encountered non-finite values.
    Numeric(String),
    /// Invalid input data (empty dataset, out-of-range label, ...).
    Input(String),
    /// A file does not conform to its binary format.
    Format(String),
    /// A stored artifact failed checksum or manifest validation.
    Corrupt(String),
    /// Training diverged; carries the epoch where it happened.
    Training { epoch: usize, message: String },
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension(m) => write!(f, "dimension error: {m}"),
            Error::Contract(m) => write!(f, "contract error: {m}"),
            Error::Config(m) => write!(f, "config error: {m}"),
            Error::Numeric(m) => write!(f, "numeric error: {m}"),
            Error::Input(m) => write!(f, "input error: {m}"),
            Error::Format(m) => write!(f, "format error: {m}"),
            Error::Corrupt(m) => write!(f, "artifact corruption: {m}"),
            Error::Training { epoch, message } => {
                write!(f, "training error at epoch {epoch}: {message}")
            }
            Error::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}
