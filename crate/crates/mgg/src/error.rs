use std::path::Path;

use mgg_core::Error as CoreError;

/// Failure classes with their process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Other = 1,
    Config = 2,
    Data = 3,
    Numeric = 4,
    Shape = 5,
}

#[derive(Debug, thiserror::Error)]
#[error("{message}")]
pub struct CliError {
    pub kind: Kind,
    pub message: String,
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn new(kind: Kind, message: impl Into<String>) -> Self {
        Self { kind, message: message.into() }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new(Kind::Config, message)
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self::new(Kind::Data, message)
    }

    pub fn shape(message: impl Into<String>) -> Self {
        Self::new(Kind::Shape, message)
    }

    pub fn exit_code(&self) -> i32 {
        self.kind as i32
    }

    pub fn io(path: &Path, err: std::io::Error) -> Self {
        Self::new(Kind::Other, format!("{}: {err}", path.display()))
    }

    /// Prefixes the message with `context`.
    pub fn context(mut self, context: impl std::fmt::Display) -> Self {
        self.message = format!("{context}: {}", self.message);
        self
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        let kind = match &e {
            CoreError::NonFinite { .. } | CoreError::Divergence { .. } | CoreError::Diverged { .. } => Kind::Numeric,
            CoreError::Config(_) | CoreError::Alpha(_) | CoreError::DegenerateGraph(_) | CoreError::UnknownGroup(_) => {
                Kind::Config
            }
            CoreError::Parse { .. } | CoreError::UnknownAttribute(_) => Kind::Config,
            CoreError::Dimension { .. } => Kind::Shape,
            _ => Kind::Other,
        };
        Self::new(kind, e.to_string())
    }
}

/// Attaches a failure class to foreign errors.
pub trait ResultExt<T> {
    fn or_kind(self, kind: Kind, context: impl std::fmt::Display) -> CliResult<T>;
}

impl<T, E: std::fmt::Display> ResultExt<T> for Result<T, E> {
    fn or_kind(self, kind: Kind, context: impl std::fmt::Display) -> CliResult<T> {
        self.map_err(|e| CliError::new(kind, format!("{context}: {e}")))
    }
}
