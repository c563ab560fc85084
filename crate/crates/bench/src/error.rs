use thiserror::Error;

pub type Result<T, E = BenchError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum BenchError {
    /// Bad flags, config file or parameter combination.
    #[error("{0}")]
    Usage(String),
    /// A kernel, invariant or round-trip check failed.
    #[error("verification failed: {0}")]
    Verification(String),
    #[error(transparent)]
    Core(#[from] qcache::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl BenchError {
    pub fn usage(msg: impl Into<String>) -> Self {
        BenchError::Usage(msg.into())
    }

    pub fn verification(msg: impl Into<String>) -> Self {
        BenchError::Verification(msg.into())
    }

    /// 1 for failed checks and runtime errors, 2 for usage errors.
    pub fn exit_code(&self) -> i32 {
        match self {
            BenchError::Usage(_) => 2,
            BenchError::Core(qcache::Error::Config(_) | qcache::Error::Shape(_)) => 2,
            _ => 1,
        }
    }
}
