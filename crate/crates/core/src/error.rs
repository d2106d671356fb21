use std::path::PathBuf;

/// Library-wide error type.
///
/// The CLI maps these onto exit codes: validation problems (bad arguments,
/// malformed files, degenerate inputs) exit with 2, numerical failures
/// (diverged runs, underdetermined fits) exit with 3.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("format error in {path}: {detail} (at byte offset {offset})")]
    Format {
        path: PathBuf,
        detail: String,
        offset: u64,
    },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("underdetermined fit: {0}")]
    Underdetermined(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("config error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn degenerate(msg: impl Into<String>) -> Self {
        Error::DegenerateInput(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Exit code that the CLI should use for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numerical(_) | Error::Underdetermined(_) => 3,
            _ => 2,
        }
    }
}
