use thiserror::Error;

/// Failure categories. The CLI maps each to a distinct exit status.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<tdpcr_autodiff::Error> for Error {
    fn from(e: tdpcr_autodiff::Error) -> Self {
        match e {
            tdpcr_autodiff::Error::Shape(m) => Error::Shape(m),
            tdpcr_autodiff::Error::Argument(m) => Error::Argument(m),
            tdpcr_autodiff::Error::Numeric(m) => Error::Numeric(m),
        }
    }
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io { path: path.as_ref().display().to_string(), source }
    }
}
