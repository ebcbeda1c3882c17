use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("unbound parameter '{0}'")]
    UnboundParameter(String),
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("size overflow: {0}")]
    Size(String),
    #[error("invalid argument: {0}")]
    Domain(String),
    #[error("{what} did not converge (residual {residual:.3e})")]
    NoConvergence { what: String, residual: f64 },
    #[error("boundary mass {mass:.3e} exceeds threshold {threshold:.1e}")]
    Boundary { mass: f64, threshold: f64 },
    #[error("boundary mass {mass:.3e} exceeds threshold {threshold:.1e} at step {step} (t = {t})")]
    BoundaryAtStep { step: usize, t: f64, mass: f64, threshold: f64 },
    #[error("norm blew up at step {step} (t = {t}): growth factor {factor:.3e}")]
    Blowup { step: usize, t: f64, factor: f64 },
    #[error("infeasible fit: {0}")]
    Infeasible(String),
    #[error("missing derivative: {0}")]
    MissingDerivative(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
