use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor extents.
    #[error("dimension error: {0}")]
    Shape(String),

    #[error("index error: {0}")]
    Index(String),

    /// A caller broke an operation's precondition.
    #[error("contract error: {0}")]
    Contract(String),

    /// NaN or infinity showed up where finite values are required.
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("surgery error: {0}")]
    Surgery(String),

    #[error("verification error: {0}")]
    Verification(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}
