use thiserror::Error;

/// Unified error type for the whole pipeline.
///
/// Variants are grouped so the CLI can map them onto its exit-code contract:
/// parse/validation problems, numeric failures (divergence, NaN), and I/O.
#[derive(Debug, Error)]
pub enum Error {
    #[error("case syntax error at line {line}: {message}")]
    CaseSyntax { line: usize, message: String },

    #[error("case validation error: {0}")]
    CaseSemantic(String),

    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    DimensionMismatch {
        expected: usize,
        got: usize,
        context: String,
    },

    #[error("power flow diverged after {iterations} iterations (worst mismatch {mismatch:.3e} p.u.)")]
    Diverged { iterations: usize, mismatch: f64 },

    #[error("Jacobian is singular")]
    SingularJacobian,

    #[error("infeasible dispatch: {0}")]
    InfeasibleDispatch(String),

    #[error("dataset generation aborted: rejection rate {rate:.1}% over the last {window} attempts")]
    RejectionRate { rate: f64, window: usize },

    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("non-finite value encountered in {0}; training halted")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Exit-code class for the CLI: 2 usage/config, 3 numeric, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::CaseSyntax { .. }
            | Error::CaseSemantic(_)
            | Error::DimensionMismatch { .. }
            | Error::InvalidConfig(_) => 2,
            Error::Diverged { .. }
            | Error::SingularJacobian
            | Error::InfeasibleDispatch(_)
            | Error::RejectionRate { .. }
            | Error::InvalidSchedule(_)
            | Error::NonFinite(_) => 3,
            Error::Io { .. } | Error::Serde(_) => 4,
        }
    }
}
