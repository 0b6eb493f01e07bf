use thiserror::Error;

/// Errors surfaced by every layer of the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Caller supplied a value outside the operation's domain.
    #[error("invalid input: {0}")]
    Input(String),

    /// A fixed-point accumulation would wrap the field modulus.
    #[error("field overflow: {len} products exceed the safe maximum of {max_safe_len}")]
    Overflow { len: usize, max_safe_len: usize },

    /// A fixed-point value decoded outside the centered range.
    #[error("decoded magnitude exceeds half the field modulus")]
    DecodeOverflow,

    /// Message ordering or bookkeeping broke the protocol contract.
    #[error("protocol violation: {0}")]
    Protocol(String),

    /// A privacy accounting invariant did not hold.
    #[error("privacy invariant violated: {0}")]
    Invariant(String),

    #[error("solver failure: {0}")]
    Solver(String),

    #[error("ingestion error at row {row}, column '{column}': {message}")]
    Ingest {
        row: usize,
        column: String,
        message: String,
    },

    /// A method failed inside one experiment replicate.
    #[error("{method} failed in replicate {replicate}: {source}")]
    Replicate {
        method: String,
        replicate: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code: 1 for configuration and input problems, 2 for
    /// protocol or privacy failures, 3 for solver failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Replicate { source, .. } => source.exit_code(),
            Error::Overflow { .. }
            | Error::DecodeOverflow
            | Error::Protocol(_)
            | Error::Invariant(_) => 2,
            Error::Solver(_) => 3,
            Error::Input(_) | Error::Ingest { .. } | Error::Csv(_) | Error::Json(_) | Error::Io(_) => 1,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn input<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Input(msg.into()))
}
