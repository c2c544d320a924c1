//! Error types shared across the crate.

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A value fell outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// An argument violated a precondition (empty input, bad range, ...).
    #[error("invalid argument: {0}")]
    Argument(String),

    /// Matrix or vector dimensions do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A cell of an input file could not be parsed.
    #[error("ingest error at row {row}, column {col}: {message}")]
    Ingest {
        row: usize,
        col: usize,
        message: String,
    },

    /// Structural problem with an input file (ragged rows, missing header, ...).
    #[error("format error: {0}")]
    Format(String),

    /// A label could not be encoded against the known class list.
    #[error("encoding error: {0}")]
    Encoding(String),

    /// A wire frame or payload failed validation.
    #[error("protocol error at byte {offset}: {message}")]
    Protocol { offset: u64, message: String },

    /// Network-level failure (connect, read, write).
    #[error("transport error: {0}")]
    Transport(#[source] std::io::Error),

    /// The remote peer reported an error frame.
    #[error("remote error: {0}")]
    Remote(String),

    /// A numerical routine failed to converge.
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn protocol(offset: u64, message: impl Into<String>) -> Self {
        Error::Protocol {
            offset,
            message: message.into(),
        }
    }
}
