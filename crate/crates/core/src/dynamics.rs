//! Deterministic moment flows for the conditional covariance `σ_c`
//! (a Riccati equation, independent of feedback) and the estimator
//! covariance `σ_m` (a Lyapunov flow with a `σ_c`-dependent source), split
//! into bath, Hamiltonian, feedback, backaction and conditioning stages.
//!
//! The averaged covariance is `Σ = σ_c + σ_m`. Conditioning terms of the two
//! flows cancel, so `Σ` only sees bath, Hamiltonian, feedback and backaction.

use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::gaussian::{validate, CovarianceMatrix, SystemParams};
use crate::linalg::{Mat2, Mat3, Sym2};

/// Measurement unraveling governing the moment flows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Scheme {
    /// Continuous QND position measurement with momentum backaction `2k`.
    QndPosition,
    /// Homodyne detection of `â`, which adds measurement-induced damping.
    AnnihilationHomodyne,
    /// Simultaneous detection of `â` and `â†`; damping cancels.
    DualNoDamp,
    /// QND measurement alone: no bath, no oscillator Hamiltonian.
    PureMeasurement,
}

impl Scheme {
    pub const ALL: [Scheme; 4] = [
        Scheme::QndPosition,
        Scheme::AnnihilationHomodyne,
        Scheme::DualNoDamp,
        Scheme::PureMeasurement,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Scheme::QndPosition => "qnd",
            Scheme::AnnihilationHomodyne => "homodyne",
            Scheme::DualNoDamp => "dual",
            Scheme::PureMeasurement => "pure",
        }
    }

    fn has_environment(&self) -> bool {
        !matches!(self, Scheme::PureMeasurement)
    }

    /// Extra amplitude damping of the means contributed by the measurement.
    fn measurement_damping(&self, params: &SystemParams) -> f64 {
        match self {
            Scheme::AnnihilationHomodyne => params.k,
            _ => 0.0,
        }
    }

    /// Conditioning channels `(weight, offset)`: each removes
    /// `weight · c cᵀ` from `σ_c`, with `c = (σ_xx + offset, σ_xp)`.
    pub(crate) fn channels(&self, params: &SystemParams) -> [(f64, f64); 2] {
        let keta = params.k * params.eta;
        match self {
            Scheme::QndPosition | Scheme::PureMeasurement => [(8.0 * keta, 0.0), (0.0, 0.0)],
            Scheme::AnnihilationHomodyne => [(4.0 * keta, -0.5), (0.0, 0.0)],
            Scheme::DualNoDamp => [(2.0 * keta, -0.5), (2.0 * keta, 0.5)],
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scheme {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "qnd" | "qnd_position" | "qndposition" => Ok(Scheme::QndPosition),
            "homodyne" | "annihilation_homodyne" | "annihilationhomodyne" => Ok(Scheme::AnnihilationHomodyne),
            "dual" | "dual_no_damp" | "dualnodamp" => Ok(Scheme::DualNoDamp),
            "pure" | "pure_measurement" | "puremeasurement" => Ok(Scheme::PureMeasurement),
            other => Err(format!("unknown scheme `{other}` (expected qnd, homodyne, dual or pure)")),
        }
    }
}

/// Estimator and gain convention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FeedbackKind {
    /// Kalman estimate fed back on both quadratures: `a_x = b_p = g`.
    KalmanXP,
    /// Kalman estimate fed back through `x̂` only: `b_x = b_p = g`.
    KalmanXOnly,
    /// Raw record `dy` fed back without filtering, gains `(a_x, b_x)`.
    Direct,
}

impl FeedbackKind {
    pub fn name(&self) -> &'static str {
        match self {
            FeedbackKind::KalmanXP => "kalman_xp",
            FeedbackKind::KalmanXOnly => "kalman_x",
            FeedbackKind::Direct => "direct",
        }
    }
}

impl FromStr for FeedbackKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "kalman_xp" | "kalmanxp" | "xp" => Ok(FeedbackKind::KalmanXP),
            "kalman_x" | "kalman_x_only" | "kalmanxonly" | "x" => Ok(FeedbackKind::KalmanXOnly),
            "direct" => Ok(FeedbackKind::Direct),
            other => Err(format!("unknown feedback law `{other}` (expected kalman_xp, kalman_x or direct)")),
        }
    }
}

/// Linear feedback gains. The feedback Hamiltonian is
/// `−(a_x m_x + a_p m_p) p̂ + (b_x m_x + b_p m_p) x̂`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Gains {
    pub a_x: f64,
    pub a_p: f64,
    pub b_x: f64,
    pub b_p: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeedbackLaw {
    pub kind: FeedbackKind,
    pub gains: Gains,
}

impl FeedbackLaw {
    pub fn kalman_xp(g: f64) -> Self {
        Self { kind: FeedbackKind::KalmanXP, gains: Gains { a_x: g, b_p: g, ..Gains::default() } }
    }

    pub fn kalman_x_only(g: f64) -> Self {
        Self { kind: FeedbackKind::KalmanXOnly, gains: Gains { b_x: g, b_p: g, ..Gains::default() } }
    }

    pub fn direct(a_x: f64, b_x: f64) -> Self {
        Self { kind: FeedbackKind::Direct, gains: Gains { a_x, b_x, ..Gains::default() } }
    }

    /// Kalman filter running with all gains zero (no feedback).
    pub fn none() -> Self {
        Self::kalman_xp(0.0)
    }

    /// The convention's single-gain family at gain `g`. Direct feedback
    /// acts on the position quadrature: `a_x = g`, `b_x = 0`.
    pub fn from_gain(kind: FeedbackKind, g: f64) -> Self {
        match kind {
            FeedbackKind::KalmanXP => Self::kalman_xp(g),
            FeedbackKind::KalmanXOnly => Self::kalman_x_only(g),
            FeedbackKind::Direct => Self::direct(g, 0.0),
        }
    }

    pub fn is_kalman(&self) -> bool {
        !matches!(self.kind, FeedbackKind::Direct)
    }

    /// Characteristic gain magnitude, the largest absolute gain.
    pub fn gain_scale(&self) -> f64 {
        let g = &self.gains;
        g.a_x.abs().max(g.a_p.abs()).max(g.b_x.abs()).max(g.b_p.abs())
    }

    /// Drift the feedback adds to the means. Direct feedback only uses
    /// `(a_x, b_x)`.
    pub fn drift(&self) -> Mat2 {
        let g = &self.gains;
        match self.kind {
            FeedbackKind::Direct => Mat2::new(-g.a_x, 0.0, -g.b_x, 0.0),
            _ => Mat2::new(-g.a_x, -g.a_p, -g.b_x, -g.b_p),
        }
    }
}

/// Stage-split time derivative of a covariance (variance per unit time).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StageRates {
    pub bath: Sym2,
    pub hamiltonian: Sym2,
    pub feedback: Sym2,
    /// Measurement backaction (and, for homodyne, the measurement dissipator).
    pub backaction: Sym2,
    /// Information gain from conditioning on the record.
    pub conditioning: Sym2,
    /// Largest single term summed into any stage. The direct feedback
    /// stage cancels terms of order g²/(8kη) internally, so its own entry
    /// understates the rounding floor.
    term_scale: f64,
}

impl StageRates {
    /// Backaction plus conditioning.
    pub fn measurement(&self) -> Sym2 {
        self.backaction + self.conditioning
    }

    pub fn total(&self) -> Sym2 {
        self.bath + self.hamiltonian + self.feedback + self.backaction + self.conditioning
    }

    /// Largest entry over all stages and the terms summed into them; the
    /// natural scale for residuals.
    pub fn scale(&self) -> f64 {
        [self.bath, self.hamiltonian, self.feedback, self.backaction, self.conditioning]
            .iter()
            .fold(self.term_scale, |acc, s| acc.max(s.max_abs()))
    }

    /// `‖total‖∞ / max(1, scale)`.
    pub fn relative_residual(&self) -> f64 {
        self.total().max_abs() / self.scale().max(1.0)
    }
}

impl std::ops::Add for StageRates {
    type Output = StageRates;
    fn add(self, o: StageRates) -> StageRates {
        StageRates {
            bath: self.bath + o.bath,
            hamiltonian: self.hamiltonian + o.hamiltonian,
            feedback: self.feedback + o.feedback,
            backaction: self.backaction + o.backaction,
            conditioning: self.conditioning + o.conditioning,
            term_scale: self.term_scale.max(o.term_scale),
        }
    }
}

fn hamiltonian_drift(params: &SystemParams, scheme: Scheme) -> Mat2 {
    if scheme.has_environment() {
        Mat2::new(0.0, params.omega, -params.omega, 0.0)
    } else {
        Mat2::ZERO
    }
}

fn bath_gamma(params: &SystemParams, scheme: Scheme) -> f64 {
    if scheme.has_environment() {
        params.gamma
    } else {
        0.0
    }
}

/// Drift of the means without feedback: rotation plus damping.
pub fn free_drift(params: &SystemParams, scheme: Scheme) -> Mat2 {
    let damp = 0.5 * bath_gamma(params, scheme) + scheme.measurement_damping(params);
    hamiltonian_drift(params, scheme) + Mat2::new(-damp, 0.0, 0.0, -damp)
}

/// Full drift of the conditional means under `law`.
pub fn estimator_drift(law: &FeedbackLaw, params: &SystemParams, scheme: Scheme) -> Mat2 {
    free_drift(params, scheme) + law.drift()
}

/// Conditional-covariance stages without input validation (used inside
/// integrators, which may pass through intermediate unphysical points).
pub(crate) fn conditional_stages(cov_c: &Sym2, params: &SystemParams, scheme: Scheme) -> StageRates {
    let gamma = bath_gamma(params, scheme);
    let bath = if scheme.has_environment() {
        Sym2::scaled_identity(params.bath_diffusion()) - cov_c.scale(gamma)
    } else {
        Sym2::ZERO
    };
    let k = params.k;
    let backaction = match scheme {
        Scheme::QndPosition | Scheme::PureMeasurement => Sym2::diag(0.0, 2.0 * k),
        Scheme::AnnihilationHomodyne => Sym2::scaled_identity(k) - cov_c.scale(2.0 * k),
        Scheme::DualNoDamp => Sym2::scaled_identity(k),
    };
    StageRates {
        bath,
        hamiltonian: hamiltonian_drift(params, scheme).lyapunov(cov_c),
        feedback: Sym2::ZERO,
        backaction,
        conditioning: -estimator_source(cov_c, params, scheme),
        term_scale: 0.0,
    }
}

/// Information source `V(σ_c)` feeding the estimator covariance; equal and
/// opposite to the conditioning stage of `σ_c`.
pub fn estimator_source(cov_c: &Sym2, params: &SystemParams, scheme: Scheme) -> Sym2 {
    scheme
        .channels(params)
        .iter()
        .filter(|(w, _)| *w != 0.0)
        .fold(Sym2::ZERO, |acc, &(w, offset)| acc + Sym2::outer(cov_c.xx + offset, cov_c.xp).scale(w))
}

/// Riccati right-hand side for `σ_c`, split by stage. The feedback stage
/// is identically zero: feedback displaces means only.
pub fn sigma_c_rhs(cov_c: &CovarianceMatrix, params: &SystemParams, scheme: Scheme) -> Result<StageRates> {
    validate(cov_c, false)?;
    Ok(conditional_stages(cov_c, params, scheme))
}

/// Lyapunov right-hand side for `σ_m` under a Kalman estimator.
pub fn sigma_m_rhs(
    cov_m: &CovarianceMatrix,
    cov_c: &CovarianceMatrix,
    law: &FeedbackLaw,
    params: &SystemParams,
    scheme: Scheme,
) -> Result<StageRates> {
    if !law.is_kalman() {
        return Err(Error::UnsupportedEstimator { op: "sigma_m_rhs" });
    }
    validate(cov_m, true)?;
    validate(cov_c, false)?;
    Ok(estimator_stages(cov_m, cov_c, law, params, scheme))
}

fn estimator_stages(cov_m: &Sym2, cov_c: &Sym2, law: &FeedbackLaw, params: &SystemParams, scheme: Scheme) -> StageRates {
    let gamma = bath_gamma(params, scheme);
    StageRates {
        bath: cov_m.scale(-gamma),
        hamiltonian: hamiltonian_drift(params, scheme).lyapunov(cov_m),
        feedback: law.drift().lyapunov(cov_m),
        backaction: cov_m.scale(-2.0 * scheme.measurement_damping(params)),
        conditioning: estimator_source(cov_c, params, scheme),
        term_scale: 0.0,
    }
}

/// Noise vector `B` of the closed direct-feedback mean dynamics,
/// `B = √(8kη)·(σ_xx,c, σ_xp,c) − (a_x, b_x)/√(8kη)`.
pub fn direct_noise_vector(cov_c: &Sym2, law: &FeedbackLaw, params: &SystemParams) -> Result<[f64; 2]> {
    let rate = params.info_rate();
    let (a_x, b_x) = (law.gains.a_x, law.gains.b_x);
    if rate == 0.0 {
        if a_x == 0.0 && b_x == 0.0 {
            return Ok([0.0, 0.0]);
        }
        return Err(Error::EfficiencyZero);
    }
    let s = rate.sqrt();
    Ok([s * cov_c.xx - a_x / s, s * cov_c.xp - b_x / s])
}

/// Closed moment flow of `σ_m` for direct (Markovian, zero-delay) feedback
/// of the QND record. With constant gains the Stratonovich kick equals its
/// Itô form, so the means obey a linear SDE with drift
/// `A_ham + A_damp + [[−a_x, 0], [−b_x, 0]]` and noise `B dW`.
///
/// The feedback stage carries every gain-dependent noise term,
/// `BBᵀ − 8kη c cᵀ`, so that it is also the feedback stage of `Σ`.
pub fn direct_moment_rhs(
    cov_m: &CovarianceMatrix,
    cov_c: &CovarianceMatrix,
    law: &FeedbackLaw,
    params: &SystemParams,
) -> Result<StageRates> {
    if law.kind != FeedbackKind::Direct {
        return Err(Error::InvalidParameter {
            name: "law",
            reason: "direct_moment_rhs requires a Direct feedback law".into(),
        });
    }
    validate(cov_m, true)?;
    validate(cov_c, false)?;
    direct_stages(cov_m, cov_c, law, params)
}

fn direct_stages(cov_m: &Sym2, cov_c: &Sym2, law: &FeedbackLaw, params: &SystemParams) -> Result<StageRates> {
    let scheme = Scheme::QndPosition;
    // error path for k·η = 0 with nonzero gains
    direct_noise_vector(cov_c, law, params)?;
    let drift = law.drift();
    let rate = params.info_rate();
    let kick = if rate == 0.0 {
        Sym2::ZERO
    } else {
        Sym2::outer(law.gains.a_x, law.gains.b_x).scale(1.0 / rate)
    };
    let (on_m, on_c) = (drift.lyapunov(cov_m), drift.lyapunov(cov_c));
    Ok(StageRates {
        bath: cov_m.scale(-params.gamma),
        hamiltonian: hamiltonian_drift(params, scheme).lyapunov(cov_m),
        feedback: on_m + on_c + kick,
        backaction: Sym2::ZERO,
        conditioning: estimator_source(cov_c, params, scheme),
        term_scale: on_m.max_abs().max(on_c.max_abs()).max(kick.max_abs()),
    })
}

/// `σ_m` flow for any law: Kalman laws use [`sigma_m_rhs`], direct
/// feedback (QND only) uses [`direct_moment_rhs`].
pub fn estimator_rhs(
    cov_m: &CovarianceMatrix,
    cov_c: &CovarianceMatrix,
    law: &FeedbackLaw,
    params: &SystemParams,
    scheme: Scheme,
) -> Result<StageRates> {
    if law.is_kalman() {
        sigma_m_rhs(cov_m, cov_c, law, params, scheme)
    } else {
        require_qnd_for_direct(scheme)?;
        direct_moment_rhs(cov_m, cov_c, law, params)
    }
}

/// Stage-split flow of the averaged covariance `Σ = σ_c + σ_m`.
pub fn averaged_rhs(
    cov_c: &CovarianceMatrix,
    cov_m: &CovarianceMatrix,
    law: &FeedbackLaw,
    params: &SystemParams,
    scheme: Scheme,
) -> Result<StageRates> {
    Ok(sigma_c_rhs(cov_c, params, scheme)? + estimator_rhs(cov_m, cov_c, law, params, scheme)?)
}

fn require_qnd_for_direct(scheme: Scheme) -> Result<()> {
    if scheme == Scheme::QndPosition {
        Ok(())
    } else {
        Err(Error::UnsupportedScheme { op: "direct feedback", scheme })
    }
}

/// Eigenvalues of the 3×3 operator acting on `(σ_xx,m, σ_pp,m, σ_xp,m)`.
/// With `μ±` the eigenvalues of the mean drift `D`, they are
/// `(μ₊ + μ₋, 2μ₊, 2μ₋)`.
pub fn drift_eigenvalues(law: &FeedbackLaw, params: &SystemParams, scheme: Scheme) -> [Complex64; 3] {
    let d = estimator_drift(law, params, scheme);
    let half_trace = 0.5 * d.trace();
    // discriminant written without the tr²/4 − det cancellation
    let half_diff = 0.5 * (d.a - d.d);
    let disc = half_diff * half_diff + d.b * d.c;
    let root = Complex64::new(disc, 0.0).sqrt();
    let mu_plus = Complex64::new(half_trace, 0.0) + root;
    let mu_minus = Complex64::new(half_trace, 0.0) - root;
    [Complex64::new(d.trace(), 0.0), 2.0 * mu_plus, 2.0 * mu_minus]
}

/// Stability rates of the estimator covariance under a Kalman law for the
/// QND scheme. For `a_p = b_x = 0` these are `−(a_x+b_p+γ)` and
/// `−(a_x+b_p+γ) ± √((a_x−b_p)² − 4ω²)`.
pub fn stability_eigenvalues(law: &FeedbackLaw, params: &SystemParams) -> [Complex64; 3] {
    drift_eigenvalues(law, params, Scheme::QndPosition)
}

/// Hurwitz threshold on eigenvalue real parts.
pub const HURWITZ_MARGIN: f64 = -1e-12;

/// Steady estimator covariance: solves `A s + v = 0` directly.
pub fn steady_sigma_m(
    cov_c: &CovarianceMatrix,
    law: &FeedbackLaw,
    params: &SystemParams,
    scheme: Scheme,
) -> Result<CovarianceMatrix> {
    validate(cov_c, false)?;
    let source = if law.is_kalman() {
        estimator_source(cov_c, params, scheme)
    } else {
        require_qnd_for_direct(scheme)?;
        let b = direct_noise_vector(cov_c, law, params)?;
        Sym2::outer(b[0], b[1])
    };
    solve_lyapunov(&estimator_drift(law, params, scheme), &source, law, params, scheme)
}

fn solve_lyapunov(drift: &Mat2, source: &Sym2, law: &FeedbackLaw, params: &SystemParams, scheme: Scheme) -> Result<Sym2> {
    let max_real = drift_eigenvalues(law, params, scheme)
        .iter()
        .map(|z| z.re)
        .fold(f64::NEG_INFINITY, f64::max);
    if !(max_real < HURWITZ_MARGIN) {
        return Err(Error::NotHurwitz { max_real });
    }
    let op = drift.lyapunov_operator();
    let v = source.as_vec3();
    op.solve([-v[0], -v[1], -v[2]])
        .map(Sym2::from_vec3)
        .ok_or(Error::NotHurwitz { max_real })
}

/// Steady operating point: conditional, estimator and averaged covariances.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SteadyState {
    pub cov_c: CovarianceMatrix,
    pub cov_m: CovarianceMatrix,
    pub sigma: CovarianceMatrix,
}

/// Solves `σ_c` then `σ_m` and returns the averaged covariance alongside.
pub fn steady_state(law: &FeedbackLaw, params: &SystemParams, scheme: Scheme) -> Result<SteadyState> {
    let cov_c = steady_sigma_c(params, scheme)?;
    steady_state_with(cov_c, law, params, scheme)
}

/// As [`steady_state`] with a precomputed steady `σ_c` (which is
/// law-independent, so sweeps solve it once).
pub fn steady_state_with(
    cov_c: CovarianceMatrix,
    law: &FeedbackLaw,
    params: &SystemParams,
    scheme: Scheme,
) -> Result<SteadyState> {
    let cov_m = steady_sigma_m(&cov_c, law, params, scheme)?;
    Ok(SteadyState { cov_c, cov_m, sigma: cov_c + cov_m })
}

const MARCH_TOL: f64 = 1e-10;
const HANDOVER_TOL: f64 = 1e-6;
const POLISH_TOL: f64 = 1e-12;
const MAX_MARCH_STEPS: usize = 400_000;

/// Stationary conditional covariance, found by adaptive time-marching from
/// the thermal state `(n̄+½)I` followed by Newton polishing. Independent of
/// the feedback law.
pub fn steady_sigma_c(params: &SystemParams, scheme: Scheme) -> Result<CovarianceMatrix> {
    params.validate()?;
    let start = Sym2::scaled_identity(params.nbar + 0.5);
    let rhs = |s: &Sym2| conditional_stages(s, params, scheme);
    let polished = march_to_steady(start, &rhs, |s| {
        newton_polish(*s, params, scheme).ok().filter(|p| validate(p, false).is_ok())
    })?;
    validate(&polished, false).map_err(|_| Error::NoConvergence { residual: rhs(&polished).relative_residual() })?;
    Ok(polished)
}

/// Integrates towards the fixed point; once the residual is below
/// `MARCH_TOL` (or periodically once it is small) hands over to `polish`.
fn march_to_steady(
    start: Sym2,
    rhs: &impl Fn(&Sym2) -> StageRates,
    polish: impl Fn(&Sym2) -> Option<Sym2>,
) -> Result<Sym2> {
    // Dormand–Prince 5(4)
    const C: [f64; 7] = [0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];
    const A: [[f64; 6]; 7] = [
        [0.0; 6],
        [0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
        [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
        [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
        [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
        [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
        [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
    ];
    const B5: [f64; 7] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
    const B4: [f64; 7] = [
        5179.0 / 57600.0,
        0.0,
        7571.0 / 16695.0,
        393.0 / 640.0,
        -92097.0 / 339200.0,
        187.0 / 2100.0,
        1.0 / 40.0,
    ];
    let _ = C;
    let (rtol, atol) = (1e-9, 1e-12);
    let mut y = start;
    let mut f0 = rhs(&y);
    let mut h = 0.01 / (f0.total().max_abs() / y.max_abs().max(1e-300)).max(1e-3);
    let mut residual = f0.relative_residual();
    for step in 0..MAX_MARCH_STEPS {
        if residual < MARCH_TOL || (residual < HANDOVER_TOL && step % 64 == 0) {
            if let Some(done) = polish(&y) {
                return Ok(done);
            }
        }
        let mut k = [Sym2::ZERO; 7];
        k[0] = f0.total();
        for i in 1..7 {
            let mut yi = y;
            for j in 0..i {
                if A[i][j] != 0.0 {
                    yi += k[j].scale(h * A[i][j]);
                }
            }
            k[i] = rhs(&yi).total();
        }
        let mut y5 = y;
        let mut err = Sym2::ZERO;
        for i in 0..7 {
            y5 += k[i].scale(h * B5[i]);
            err += k[i].scale(h * (B5[i] - B4[i]));
        }
        let e = [err.xx, err.pp, err.xp];
        let ya = y.as_vec3();
        let yb = y5.as_vec3();
        let norm = (0..3)
            .map(|i| {
                let sc = atol + rtol * ya[i].abs().max(yb[i].abs());
                (e[i] / sc).powi(2)
            })
            .sum::<f64>()
            / 3.0;
        let norm = norm.sqrt();
        if norm <= 1.0 && y5.is_finite() {
            y = y5;
            f0 = rhs(&y);
            residual = f0.relative_residual();
        }
        let factor = if norm == 0.0 { 5.0 } else { (0.9 * norm.powf(-0.2)).clamp(0.2, 5.0) };
        h *= factor;
        if !h.is_finite() || h <= 0.0 {
            break;
        }
    }
    Err(Error::NoConvergence { residual })
}

/// Jacobian of the `σ_c` flow with respect to `(σ_xx, σ_pp, σ_xp)`.
fn conditional_jacobian(s: &Sym2, params: &SystemParams, scheme: Scheme) -> Mat3 {
    let mut j = hamiltonian_drift(params, scheme).lyapunov_operator().0;
    let diag = -bath_gamma(params, scheme) - 2.0 * scheme.measurement_damping(params);
    for (i, row) in j.iter_mut().enumerate() {
        row[i] += diag;
    }
    for &(w, offset) in scheme.channels(params).iter().filter(|(w, _)| *w != 0.0) {
        let cx = s.xx + offset;
        j[0][0] -= 2.0 * w * cx;
        j[1][2] -= 2.0 * w * s.xp;
        j[2][0] -= w * s.xp;
        j[2][2] -= w * cx;
    }
    Mat3(j)
}

fn newton_polish(start: Sym2, params: &SystemParams, scheme: Scheme) -> Result<Sym2> {
    let mut s = start;
    let mut stages = conditional_stages(&s, params, scheme);
    for _ in 0..50 {
        if stages.relative_residual() < POLISH_TOL * 1e-2 {
            break;
        }
        let f = stages.total().as_vec3();
        let Some(dx) = conditional_jacobian(&s, params, scheme).solve(f) else {
            break;
        };
        let next = Sym2::new(s.xx - dx[0], s.pp - dx[1], s.xp - dx[2]);
        let next_stages = conditional_stages(&next, params, scheme);
        if next_stages.relative_residual() >= stages.relative_residual() {
            break;
        }
        s = next;
        stages = next_stages;
    }
    let residual = stages.relative_residual();
    if residual < POLISH_TOL {
        Ok(s)
    } else {
        Err(Error::NoConvergence { residual })
    }
}
