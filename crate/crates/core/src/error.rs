use thiserror::Error;

/// Failure modes of the numerical core.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("fields live on different grids")]
    GridMismatch,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("negative weight at index {0}")]
    NegativeWeight(usize),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("no convergence after {iterations} iterations: {what}")]
    NotConverged { what: String, iterations: usize },
    #[error("overflow: {0}")]
    Overflow(String),
    #[error("CFL condition violated: {0}")]
    Cfl(String),
    #[error("matrix is not positive definite: {0}")]
    Indefinite(String),
    #[error("no admissible parameters: {0}")]
    Infeasible(String),
    #[error("divergent integral: {0}")]
    Divergent(String),
    #[error("mass constraint violated: {0}")]
    Normalization(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for failures caused by bad user input rather than by the numerics.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::InvalidGrid(_)
                | Error::GridMismatch
                | Error::InvalidParameter(_)
                | Error::Parse(_)
                | Error::Divergent(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
