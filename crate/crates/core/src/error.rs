use thiserror::Error;

/// Errors produced anywhere in the toolkit.
///
/// Variants are grouped by the process exit code the command-line front end
/// maps them to (see [`Error::exit_code`]).
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("angle {value} outside the accepted domain [{lo}, {hi}]")]
    AngleOutOfDomain { value: f64, lo: f64, hi: f64 },

    #[error("config error at line {line}, column {column}: {message}")]
    Config {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("cannot read config file {0}")]
    ConfigFile(String),

    #[error("input stream is not time-ordered at index {index}")]
    UnorderedStream { index: usize },

    #[error("quadrature did not converge: estimated error {error_estimate:e} after {intervals} subintervals")]
    QuadratureNonConvergence {
        error_estimate: f64,
        intervals: usize,
    },

    #[error("histogram error: {0}")]
    Histogram(String),

    #[error("fit failed: {0}")]
    Fit(String),

    #[error("singular Jacobian: the data carries no information on any fit parameter")]
    SingularJacobian,

    #[error("fit did not converge: {0}")]
    NonConvergence(String),

    #[error("insufficient angle coverage: {0}")]
    AngleCoverage(String),

    #[error("malformed event file: {0}")]
    EventFile(String),

    #[error("malformed data: {0}")]
    Data(String),

    #[error("pipeline stage `{stage}` violated an invariant: {reason}")]
    Stage { stage: &'static str, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    /// Process exit code for this error: 2 config, 3 data, 4 non-convergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidParameter { .. } | Error::AngleOutOfDomain { .. } | Error::Config { .. } | Error::ConfigFile(_) => 2,
            Error::NonConvergence(_) | Error::QuadratureNonConvergence { .. } => 4,
            _ => 3,
        }
    }
}
