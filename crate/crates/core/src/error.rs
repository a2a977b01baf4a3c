use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the toolkit.
///
/// The CLI maps [`Error::is_input_error`] to exit code 2 and everything else
/// numerical to exit code 3.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported version {found} (expected {expected})")]
    VersionMismatch { found: u16, expected: u16 },
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error("dim/payload mismatch: {0}")]
    DimMismatch(String),
    #[error("non-finite payload at index {index}")]
    NonFinite { index: usize },
    #[error("malformed header: {0}")]
    Header(String),
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("datapoint count mismatch: {left} vs {right}")]
    DatapointMismatch { left: usize, right: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("zero variance subspace")]
    ZeroVariance,
    #[error("not PSD: eigenvalue {eigenvalue:e} below -{floor:e}")]
    NotPsd { eigenvalue: f64, floor: f64 },
    #[error("matrix is not Hermitian (relative asymmetry {0:e})")]
    NotHermitian(f64),
    #[error("{0} did not converge")]
    NoConvergence(&'static str),
    #[error("training diverged at step {step} (loss {loss})")]
    Diverged { step: usize, loss: f64 },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for malformed files, bad arguments and shape problems; false for
    /// failures of the numerics themselves.
    pub fn is_input_error(&self) -> bool {
        !matches!(
            self,
            Error::ZeroVariance
                | Error::NotPsd { .. }
                | Error::NotHermitian(_)
                | Error::NoConvergence(_)
                | Error::Diverged { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
