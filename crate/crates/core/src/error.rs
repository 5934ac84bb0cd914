use thiserror::Error;

/// Error type shared across the crate.
///
/// The variants map onto distinct process exit codes in the CLI:
/// configuration problems (2), numerical-guard rejections (3) and
/// solver failures (4).
#[derive(Debug, Error)]
pub enum TamdError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("numerical guard: {0}")]
    Guard(String),

    #[error("solver failure: {0}")]
    Solver(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl TamdError {
    pub fn exit_code(&self) -> i32 {
        match self {
            TamdError::Config(_) => 2,
            TamdError::Guard(_) => 3,
            TamdError::Solver(_) => 4,
            TamdError::Io(_) => 5,
        }
    }
}

pub type Result<T> = std::result::Result<T, TamdError>;
