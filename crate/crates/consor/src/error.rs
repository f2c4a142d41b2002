use crate::dataset::ValidationReport;

pub type Result<T> = std::result::Result<T, Error>;

/// Library-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("unknown taxonomy `{name}`; valid options: {options}")]
    UnknownTaxonomy { name: String, options: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dataset validation failed:\n{0}")]
    InvalidDataset(ValidationReport),

    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("corrupt feature pack: {0}")]
    Corrupt(String),

    #[error("missing fixture(s): {}", ids.join(", "))]
    MissingFixture { ids: Vec<String> },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("checkpoint mismatch: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable one-word category used by command-line reporting.
    pub fn category(&self) -> &'static str {
        match self {
            Error::UnknownTaxonomy { .. } | Error::Config(_) => "config",
            Error::InvalidDataset(_) => "validation",
            Error::Parse { .. } => "parse",
            Error::Corrupt(_) => "corrupt",
            Error::MissingFixture { .. } => "missing-fixture",
            Error::Shape(_) => "shape",
            Error::Numeric(_) => "numeric",
            Error::Precondition(_) => "precondition",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io(_) => "io",
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        }
    }
}
