use std::path::PathBuf;

use thiserror::Error;
use vmb_autodiff::AdError;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad magic (not a VELB file)")]
    BadMagic { path: PathBuf },
    #[error("{path}: truncated payload ({expected} bytes expected, {actual} present)")]
    Truncated {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },
    #[error("{path}: non-finite value at payload index {index}")]
    NonFinitePayload { path: PathBuf, index: usize },
    #[error("{path}: unsupported header: {msg}")]
    Header { path: PathBuf, msg: String },
    #[error("invalid {what}: {msg}")]
    Invalid { what: &'static str, msg: String },
    #[error("CFL violation: dt = {dt} s exceeds 0.5·min(dz,dx)/v_max = {bound} s")]
    Cfl { dt: f64, bound: f64 },
    #[error("wavelet truncated: nt·dt = {span} s is shorter than 2·t0 = {need} s")]
    WaveletTruncated { span: f64, need: f64 },
    #[error("blow-up at step {step}")]
    BlowUp { step: usize },
    #[error("non-finite loss at {context}")]
    NonFiniteLoss { context: String },
    #[error("{path}:{line}: {msg}")]
    Manifest {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error(transparent)]
    Autodiff(#[from] AdError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by numerics rather than inputs or I/O.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::BlowUp { .. } | Error::NonFiniteLoss { .. } | Error::Autodiff(AdError::NonFinite { .. })
        )
    }
}

pub(crate) fn invalid(what: &'static str, msg: impl Into<String>) -> Error {
    Error::Invalid { what, msg: msg.into() }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
