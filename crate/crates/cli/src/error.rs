use contrastlab_core::Error as CoreError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Malformed or inconsistent configuration.
    #[error("schema error: {0}")]
    Schema(String),

    #[error(transparent)]
    Core(#[from] CoreError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub fn schema(msg: impl Into<String>) -> CliError {
    CliError::Schema(msg.into())
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_OTHER: i32 = 1;
pub const EXIT_SCHEMA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const EXIT_BOUND_VIOLATION: i32 = 4;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Schema(_) | CliError::Core(CoreError::InvalidArgument { .. }) => EXIT_SCHEMA,
            CliError::Core(
                CoreError::NumericalAbort(_)
                | CoreError::NonFinite { .. }
                | CoreError::DegenerateEmbedding { .. },
            ) => EXIT_NUMERICAL,
            _ => EXIT_OTHER,
        }
    }
}
