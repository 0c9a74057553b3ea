use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A user-supplied parameter is out of range or inconsistent.
    #[error("invalid configuration: {field}: {reason}")]
    Config { field: String, reason: String },

    /// Two arrays that must share a length do not.
    #[error("shape mismatch in {what}: expected {expected} elements, got {actual}")]
    Shape {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    /// A structured document failed to parse.
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    /// A parsed scenario or grid violates one of its invariants.
    #[error("validation failed: {0}")]
    Validation(String),

    #[error("internal invariant violated: {0}")]
    Invariant(String),

    #[error("non-finite latent in sample {sample} at inference step {step}")]
    NonFinite { sample: usize, step: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    /// Configuration-class errors are the caller's fault and surface before
    /// any sampling work starts.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config { .. } | Error::Parse { .. } | Error::Validation(_)
        )
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        let mut message = e.to_string();
        // serde_json appends its own position suffix; we report it separately.
        if let Some(idx) = message.rfind(" at line ") {
            message.truncate(idx);
        }
        Error::Parse {
            line: e.line(),
            column: e.column(),
            message,
        }
    }
}

pub(crate) fn check_len(what: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::Shape {
            what,
            expected,
            actual,
        })
    }
}
