//! Gaussian moment dynamics of a continuously measured harmonic oscillator
//! under Kalman-filtered or direct feedback, with stochastic trajectory
//! simulation and information-thermodynamic rate bookkeeping.
//!
//! Natural units throughout: `ħ = k_B = 1`, and rates are in units of the
//! oscillator frequency unless a parameter says otherwise.

pub mod dynamics;
pub mod error;
pub mod gaussian;
pub mod linalg;
pub mod thermo;
pub mod trajectory;

pub use dynamics::{FeedbackKind, FeedbackLaw, Gains, Scheme, StageRates, SteadyState};
pub use error::{Error, Result};
pub use gaussian::{CovarianceMatrix, GaussianMoments, MeanVector, SystemParams, ThermalDecomposition};
pub use linalg::{Mat2, Mat3, Sym2};
pub use thermo::{Margins, RateReport, WorkRates};
pub use trajectory::{EnsembleStats, Estimate, SimConfig, TrajectoryState};
