use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Numerics(#[from] coca_numerics::Error),

    #[error("config: {0}")]
    Config(String),

    #[error("model: {0}")]
    Model(String),

    #[error("data: {0}")]
    Data(String),

    #[error("format: {0}")]
    Format(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("non-finite {what} at step {step}")]
    NonFinite { what: String, step: usize },

    #[error("frozen parameter {0} would be updated")]
    Frozen(String),

    #[error("evaluation: {0}")]
    Eval(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
