use thiserror::Error;

/// Errors raised by the assimilation library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("grid index ({i}, {j}) out of range for {nx}x{ny} grid")]
    Index { i: usize, j: usize, nx: usize, ny: usize },

    #[error("invalid grid: {0}")]
    Grid(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("invalid precision: diagonal entry {index} is {value}")]
    InvalidPrecision { index: usize, value: f64 },

    #[error("invalid observation: {0}")]
    Observation(String),

    #[error("dense oracle refused: {n} nodes exceeds limit of {limit}")]
    TooLarge { n: usize, limit: usize },

    #[error("matrix is not symmetric positive definite")]
    NotSpd,

    #[error("solver did not converge: {0}")]
    Solver(String),

    #[error("singular message update at node {node}")]
    SingularUpdate { node: usize },

    #[error("message passing diverged: {0}")]
    Diverged(String),

    #[error("invalid partition: {0}")]
    Partition(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
