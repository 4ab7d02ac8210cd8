use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// A ratio or mean was requested over an empty population.
    #[error("undefined value: {0}")]
    Undefined(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("unsupported model schema version {found} (expected {expected})")]
    SchemaVersion { found: u32, expected: u32 },

    #[error("model checksum mismatch (stored {stored:08x}, computed {computed:08x})")]
    Checksum { stored: u32, computed: u32 },

    #[error("malformed model document: {0}")]
    Load(String),
}

impl Error {
    pub(crate) fn parse(line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            line,
            message: message.into(),
        }
    }
}
