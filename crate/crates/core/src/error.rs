use crate::Vec3;
use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Clone, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("convexity violation: zeta.(-hess)zeta = {value} at x = {x:?}, zeta = {zeta:?}")]
    ConvexityViolation { x: Vec3, zeta: Vec3, value: f64 },

    #[error("shift path leaves the exterior domain near tau = {tau}")]
    PathInvalid { tau: f64 },

    #[error("backward ray misses the obstacle at tau = {tau}")]
    NoHit { tau: f64 },

    #[error("degenerate direction: |dir . grad xi| = {value}")]
    DegenerateDirection { value: f64 },

    #[error("near-grazing state: |grazing| = {grazing} below floor {floor}")]
    NearGrazing { grazing: f64, floor: f64 },

    #[error("quadrature did not converge: worst interval [{lo}, {hi}] with error {err}")]
    QuadratureNonConvergence { lo: f64, hi: f64, err: f64 },

    #[error("singular weight: |v| = 0 while d(x) <= {eps}")]
    SingularWeight { eps: f64 },

    #[error("sup-norm blow-up: {norm} exceeds limit {limit}")]
    Divergence { norm: f64, limit: f64 },

    #[error("field read outside grid: {0}")]
    Extrapolation(String),

    #[error("config error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
}
