use std::fmt;

/// Direction in which a multiplier search escaped to infinity.
#[derive(Debug, Clone, PartialEq)]
pub struct Divergence {
    /// Parameters (η₁..η_k) at the point the search stopped.
    pub eta: Vec<f64>,
    /// Unit vector along which the dual objective keeps decreasing.
    pub direction: Vec<f64>,
    pub reason: String,
}

impl fmt::Display for Divergence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} (eta = {:?}, direction = {:?})", self.reason, self.eta, self.direction)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("analytic law unavailable: {0}")]
    UnsupportedAnalytic(String),
    #[error("bin {bin} of {n_bins} is empty")]
    EmptyBin { bin: usize, n_bins: usize },
    #[error("no finite solution: {0}")]
    Divergence(Divergence),
    #[error("not converged after {iterations} iterations (residual {residual:.3e})")]
    NotConverged { iterations: usize, residual: f64 },
    #[error("constraints infeasible (certificate residual {gap:.3e})")]
    Infeasible { certificate: Vec<f64>, gap: f64 },
    #[error("no replicate accepted out of {attempted}: {log}")]
    NoAccepted { attempted: usize, log: String },
    #[error("parse error at line {line}: {msg}")]
    Parse { line: u64, msg: String },
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn is_divergence(&self) -> bool {
        matches!(self, Error::Divergence(_) | Error::NotConverged { .. } | Error::NoAccepted { .. })
    }
}

pub(crate) fn arg(msg: impl Into<String>) -> Error {
    Error::Argument(msg.into())
}
