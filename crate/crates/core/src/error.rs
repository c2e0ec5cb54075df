use thiserror::Error;

/// Errors raised by the estimation, simulation and learning routines.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Caller supplied malformed or non-finite input.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A configuration value is out of range or names something unknown.
    #[error("configuration error: {0}")]
    Config(String),

    /// The rank-1 anchor entry is too close to zero to divide by.
    #[error("singular pivot: |Q(s#, a#)| = {pivot:.3e} is below threshold {threshold:.3e}")]
    SingularPivot { pivot: f64, threshold: f64 },

    /// The anchor block does not certify the requested rank.
    #[error("degenerate anchors: {0}")]
    DegenerateAnchor(String),

    /// An error raised inside a learning iteration, tagged with its index.
    #[error("iteration {iteration}: {source}")]
    Iteration {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
