//! Crate-wide error type.

use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown system `{0}`")]
    UnknownSystem(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("linearization is not Hurwitz: eigenvalue with real part {re}")]
    StabilityViolation { re: f64 },

    #[error("unsupported spectrum: {0}")]
    UnsupportedSpectrum(String),

    #[error("matrix is not reliably diagonalizable: {0}")]
    Diagonalizability(String),

    #[error("resonance: lambda = 2*mu leaves the closed-form diffeomorphism undefined")]
    Resonance,

    #[error("state became non-finite at integration step {step}")]
    Divergence { step: usize },

    #[error("degenerate data: zero radius in principal coordinate {coord}")]
    DegenerateData { coord: usize },

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to parse {path}: {msg}")]
    Parse { path: PathBuf, msg: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
