use thiserror::Error;

/// Errors raised anywhere in the simulator.
///
/// The variants map one-to-one onto the error classes the CLI turns into
/// distinct exit codes (see [`Error::class`]).
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {}", .0.join("; "))]
    InvalidConfig(Vec<String>),

    #[error("invalid kernel: {0}")]
    InvalidKernel(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("unsupported geometry: {0}")]
    UnsupportedGeometry(String),

    #[error("infeasible timing: {0}")]
    InfeasibleTiming(String),

    #[error("phase mismatch: positive readout from tile {pos}, negative from tile {neg}")]
    PhaseMismatch { pos: u64, neg: u64 },

    #[error("group {group} is not ready for readout: {reason}")]
    NotReady { group: usize, reason: String },

    #[error("tile {tile} in phase {phase} cannot be exposed; reset it first")]
    InvalidPhase { tile: u64, phase: String },

    #[error("input error: {0}")]
    Input(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("internal error: {0}")]
    Internal(String),
}

/// Coarse classification used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Input,
    Geometry,
    Timing,
    Internal,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::InvalidConfig(_) => ErrorClass::Config,
            Error::InvalidKernel(_) | Error::DimensionMismatch(_) | Error::Input(_) | Error::Io { .. } => {
                ErrorClass::Input
            }
            Error::UnsupportedGeometry(_) => ErrorClass::Geometry,
            Error::InfeasibleTiming(_) => ErrorClass::Timing,
            Error::PhaseMismatch { .. } | Error::NotReady { .. } | Error::InvalidPhase { .. } | Error::Internal(_) => {
                ErrorClass::Internal
            }
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
