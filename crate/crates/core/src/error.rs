use thiserror::Error;

/// Errors raised by graph construction, spectral modelling, sampling and
/// reconstruction.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("node {node} has zero degree; the normalized Laplacian is undefined")]
    ZeroDegree { node: usize },

    #[error("matrix is not symmetric (max asymmetry {max_asymmetry:e})")]
    NotSymmetric { max_asymmetry: f64 },

    #[error("eigen-decomposition did not converge")]
    EigenNoConvergence,

    #[error("bandwidth {k} splits a repeated eigenvalue (sigma_k = {sigma_k}, sigma_k+1 = {sigma_next})")]
    BandEdgeTie { k: usize, sigma_k: f64, sigma_next: f64 },

    #[error("sampling regime mismatch: expected regime {expected}, found regime {found}")]
    RegimeMismatch { expected: u8, found: u8 },

    #[error("sample {row} selects space-time index {index} which has zero probability")]
    ZeroProbabilitySample { row: usize, index: usize },

    #[error("unsupported penalty: {0}")]
    UnsupportedPenalty(String),

    #[error("Gram matrix is not positive semidefinite (smallest eigenvalue {0:e})")]
    NotPositiveSemidefinite(f64),

    #[error("conjugate gradients stopped after {iterations} iterations at relative residual {residual:e}")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("parse error on line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidParameter(msg.into())
}
