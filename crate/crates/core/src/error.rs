use autodiff::DiffError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("embedding error: {0}")]
    Embedding(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("training diverged: {0}")]
    Training(String),
    #[error("undefined fit: {0}")]
    UndefinedFit(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("unsupported schema version {found} (expected {expected})")]
    Version { found: u64, expected: u64 },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for failures of the numerics rather than of inputs or files.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::Domain(_)
                | Error::Embedding(_)
                | Error::Diff(_)
                | Error::Training(_)
                | Error::UndefinedFit(_)
        )
    }
}
