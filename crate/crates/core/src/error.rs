use thiserror::Error;

use crate::dynamics::Scheme;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("non-positive covariance: {0}")]
    NonPositive(String),

    #[error("Heisenberg bound violated: det = {det:.6e} < 1/4 (unphysical state, likely integration blow-up)")]
    HeisenbergViolation { det: f64 },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("steady-state search did not converge (last residual {residual:.3e})")]
    NoConvergence { residual: f64 },

    #[error("drift matrix is not Hurwitz (largest eigenvalue real part {max_real:.3e}); no steady state")]
    NotHurwitz { max_real: f64 },

    #[error("measurement strength k*eta is zero; fed-back record noise diverges")]
    EfficiencyZero,

    #[error("operation `{op}` is not defined for scheme {scheme:?}")]
    UnsupportedScheme { op: &'static str, scheme: Scheme },

    #[error("operation `{op}` requires a Kalman estimator")]
    UnsupportedEstimator { op: &'static str },

    #[error("operating point is not steady (relative residual {residual:.3e})")]
    NotSteady { residual: f64 },

    #[error("stiffness guard tripped: dt * rate = {product:.3e} > {limit}")]
    StiffnessGuard { product: f64, limit: f64 },

    #[error("no post-burn-in samples (burn_in {burn_in} >= n_steps {n_steps})")]
    EmptySample { burn_in: usize, n_steps: usize },

    #[error("trajectory {index}: {source}")]
    Trajectory {
        index: usize,
        #[source]
        source: Box<Error>,
    },
}
