use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// A fairness surrogate was requested on a batch where one protected
    /// group (or the conditioning cell for DEO) is empty.
    #[error("degenerate protected group: estimated p1 = {p1}")]
    DegenerateGroup { p1: f64 },

    #[error("round {t} outside valid range [1, {max}]")]
    Range { t: usize, max: usize },

    #[error("internal consistency: {0}")]
    InternalConsistency(String),

    #[error("numerical failure at round {round}: {detail}")]
    Numerical { round: usize, detail: String },

    #[error("stream generation failed: {0}")]
    Generation(String),

    #[error("ingestion error at line {line}: {message}")]
    Ingestion { line: usize, message: String },

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
