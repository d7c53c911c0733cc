//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid network: {0}")]
    InvalidNetwork(String),

    #[error("invalid coefficients: {0}")]
    InvalidCoefficients(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("expression error: {0}")]
    Expression(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("parameter mu = {mu} outside admissible range [{min}, {max}]")]
    MuOutOfRange { mu: f64, min: f64, max: f64 },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("decay fit rejected: {0}")]
    DecayFit(String),

    #[error("greedy training stagnated: {0}")]
    GreedyStagnation(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("persistence error: {0}")]
    Persist(String),
}

pub type Result<T> = std::result::Result<T, Error>;
