use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// The kernel stayed indefinite after the largest diagonal jitter.
    #[error("singular kernel of order {order} (jitter up to {max_jitter:e} failed); {hint}")]
    SingularKernel { order: usize, max_jitter: f64, hint: &'static str },

    #[error("eigensolver did not converge after {sweeps} sweeps (off-diagonal norm {residual:e})")]
    NoConvergence { sweeps: usize, residual: f64 },

    #[error("sinkhorn overflowed at iteration {iteration}; increase the regularization (reg = {reg})")]
    TransportOverflow { iteration: usize, reg: f64 },

    #[error("non-finite value in layer {layer} of the velocity field")]
    NonFiniteLayer { layer: usize },

    #[error("integration produced a non-finite state at step {step}")]
    Integration { step: usize },

    #[error("training diverged at step {step} (loss = {loss})")]
    TrainingDiverged { step: usize, loss: f64 },

    #[error("bridge noise is singular at t = {0}; SB-CFM needs t in (0, 1)")]
    DegenerateTime(f64),

    #[error("could not place {modes} separated means after {attempts} draws")]
    Layout { modes: usize, attempts: usize },

    #[error("trial {trial}: {source}")]
    Trial {
        trial: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("checkpoint schema version {found} is not supported (expected {expected})")]
    SchemaVersion { found: u32, expected: u32 },

    #[error("malformed checkpoint {path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    /// True for failures of the numerics (as opposed to bad input or IO).
    pub fn is_numeric(&self) -> bool {
        match self {
            Error::SingularKernel { .. }
            | Error::NoConvergence { .. }
            | Error::TransportOverflow { .. }
            | Error::NonFiniteLayer { .. }
            | Error::Integration { .. }
            | Error::TrainingDiverged { .. }
            | Error::Degenerate(_)
            | Error::DegenerateTime(_) => true,
            Error::Trial { source, .. } => source.is_numeric(),
            _ => false,
        }
    }
}

impl From<ndarray::ShapeError> for Error {
    fn from(e: ndarray::ShapeError) -> Self {
        Error::InvalidInput(e.to_string())
    }
}
