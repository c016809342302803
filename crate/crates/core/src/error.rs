use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// An input violated a documented domain or configuration constraint.
    #[error("{field}: {message}")]
    Validation { field: String, message: String },

    /// Two objects that must agree in shape (grid, dimension, depth) did not.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A numerical stage produced a non-finite value or failed a consistency check.
    #[error("numeric failure in {stage}: {message}")]
    Numeric { stage: String, message: String },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn validation(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn numeric(stage: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Numeric {
            stage: stage.into(),
            message: message.into(),
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation { .. } | Error::Shape(_) => 2,
            Error::Numeric { .. } => 3,
            Error::Io(_) | Error::Csv(_) | Error::Json(_) => 4,
        }
    }
}
