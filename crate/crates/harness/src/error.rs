use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, HarnessError>;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Core(#[from] ddt_core::Error),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite loss {loss} at iteration {iteration}{}", .diagnostic.as_ref().map(|p| format!("; diagnostic checkpoint written to {}", p.display())).unwrap_or_default())]
    NonFinite {
        iteration: u64,
        loss: f64,
        diagnostic: Option<PathBuf>,
    },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("image {path}: {source}")]
    Image {
        path: PathBuf,
        source: image::ImageError,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl HarnessError {
    /// Process exit code: 2 for configuration problems, 3 for numeric
    /// failures, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::Core(
                ddt_core::Error::Config(_) | ddt_core::Error::Divisibility { .. },
            ) => 2,
            HarnessError::NonFinite { .. } | HarnessError::Numeric(_) => 3,
            _ => 1,
        }
    }
}
