use thiserror::Error;

use crate::format::FormatError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("undefined normalization: {0}")]
    UndefinedNormalization(String),

    #[error("singular normal equations at iteration {iteration}")]
    SingularSystem { iteration: usize },

    #[error("fit did not converge: {0}")]
    NotConverged(String),

    #[error("scan grids differ: {0}")]
    GridMismatch(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Format(#[from] FormatError),

    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Short machine-readable kind, used as the `ERR:<kind>:` prefix by the CLI.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "invalid-argument",
            Error::UndefinedNormalization(_) => "undefined-normalization",
            Error::SingularSystem { .. } => "singular",
            Error::NotConverged(_) => "not-converged",
            Error::GridMismatch(_) => "grid-mismatch",
            Error::Config(_) => "config",
            Error::Format(e) => e.kind(),
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
