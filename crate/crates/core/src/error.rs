use thiserror::Error;

/// Errors raised by the kinetic toolkit.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum KineticError {
    #[error("point is not on the boundary (|xi| = {0:e})")]
    NotOnBoundary(f64),
    #[error("point lies outside the domain (xi = {0:e})")]
    OutsideDomain(f64),
    #[error("stationary velocity has no exit time")]
    StationaryVelocity,
    #[error("phase point is grazing (v.n = {0:e})")]
    Grazing(f64),
    #[error("rebound budget exhausted after {0} rebounds")]
    ReboundBudgetExhausted(usize),
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: String, reason: String },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("empty probe family")]
    EmptyProbeFamily,
    #[error("smallness violated: contraction ratio {ratio:.4} after {iterations} iterations")]
    SmallnessViolated { ratio: f64, iterations: usize },
    #[error("blow-up detected at t = {0}")]
    BlowUp(f64),
    #[error("coupling failed after {iterations} outer iterations (last difference {difference:e})")]
    CouplingFailed { iterations: usize, difference: f64 },
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: String, reason: String },
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("negative value {value:e} at cell {cell}, velocity node {node}, t = {t}")]
    Negativity {
        value: f64,
        cell: usize,
        node: usize,
        t: f64,
    },
}

impl KineticError {
    pub fn invalid(name: &str, reason: impl Into<String>) -> Self {
        KineticError::InvalidParameter {
            name: name.to_string(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, KineticError>;
