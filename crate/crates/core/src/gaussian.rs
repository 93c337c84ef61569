//! Single-mode Gaussian states: physical validity, von Neumann entropy,
//! occupation, and the squeezed-thermal decomposition that defines the
//! kinetic temperatures along the covariance eigen-directions.
//!
//! Units are natural (ħ = k_B = 1). Rates are in units of ω when the
//! default `omega = 1` is used; energies are in units of ħω.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::linalg::Sym2;

/// Covariance of `(x̂, p̂)` with the symmetrised cross term.
///
/// The same type carries the averaged covariance `Σ`, the conditional
/// covariance `σ_c`, and the estimator covariance `σ_m` (which may lie
/// below the Heisenberg bound).
pub type CovarianceMatrix = Sym2;

/// Heisenberg slack: `det σ ≥ 1/4 − HEISENBERG_SLACK`.
pub const HEISENBERG_SLACK: f64 = 1e-12;

/// Distance of `ν` from 1/2 below which a state is treated as pure.
pub const PURE_STATE_TOL: f64 = 1e-12;

const HBAR_SI: f64 = 1.054_571_817e-34;
const KB_SI: f64 = 1.380_649e-23;

/// Physical environment of the oscillator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SystemParams {
    /// Oscillator angular frequency.
    pub omega: f64,
    /// Bath dissipation rate.
    pub gamma: f64,
    /// Bath occupation.
    pub nbar: f64,
    /// Measurement rate.
    pub k: f64,
    /// Detection efficiency in (0, 1].
    pub eta: f64,
}

impl SystemParams {
    pub fn new(omega: f64, gamma: f64, nbar: f64, k: f64, eta: f64) -> Result<Self> {
        let p = Self { omega, gamma, nbar, k, eta };
        p.validate()?;
        Ok(p)
    }

    /// Bath given through the product `n̄γ/ω`, which is the only combination
    /// entering the dynamics when `n̄ ≫ 1`.
    pub fn from_nbar_gamma(omega: f64, nbar_gamma_over_omega: f64, nbar: f64, k: f64, eta: f64) -> Result<Self> {
        if !(nbar > 0.0) {
            return Err(Error::InvalidParameter {
                name: "nbar",
                reason: format!("must be > 0 to split n̄γ, got {nbar}"),
            });
        }
        Self::new(omega, nbar_gamma_over_omega * omega / nbar, nbar, k, eta)
    }

    /// Levitated-nanoparticle operating point: k/ω = 0.18, η = 0.34,
    /// n̄γ/ω = 0.0058, n̄ from 292 K at ω/2π = 100 kHz.
    pub fn reference_defaults() -> Self {
        let nbar = nbar_from_kelvin(292.0, 1.0e5);
        Self::from_nbar_gamma(1.0, 0.0058, nbar, 0.18, 0.34).expect("default parameters are valid")
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, name: &'static str, reason: String| {
            if ok {
                Ok(())
            } else {
                Err(Error::InvalidParameter { name, reason })
            }
        };
        check(self.omega > 0.0 && self.omega.is_finite(), "omega", format!("must be > 0, got {}", self.omega))?;
        check(self.gamma >= 0.0 && self.gamma.is_finite(), "gamma", format!("must be >= 0, got {}", self.gamma))?;
        check(self.nbar >= 0.0 && self.nbar.is_finite(), "nbar", format!("must be >= 0, got {}", self.nbar))?;
        check(self.k >= 0.0 && self.k.is_finite(), "k", format!("must be >= 0, got {}", self.k))?;
        check(self.eta > 0.0 && self.eta <= 1.0, "eta", format!("must lie in (0, 1], got {}", self.eta))?;
        Ok(())
    }

    /// Bath temperature from detailed balance, `n̄/(n̄+1) = exp(−ω/T)`.
    pub fn temperature(&self) -> f64 {
        if self.nbar == 0.0 {
            0.0
        } else {
            self.omega / (1.0 / self.nbar).ln_1p()
        }
    }

    /// Thermal diffusion `γ(n̄ + ½)`.
    pub fn bath_diffusion(&self) -> f64 {
        self.gamma * (self.nbar + 0.5)
    }

    /// Product `8kη`, the QND information rate coefficient.
    pub fn info_rate(&self) -> f64 {
        8.0 * self.k * self.eta
    }
}

/// Bose occupation at temperature `t_kelvin` for an oscillator of ordinary
/// frequency `freq_hz` (ω = 2π·freq_hz).
pub fn nbar_from_kelvin(t_kelvin: f64, freq_hz: f64) -> f64 {
    let x = HBAR_SI * 2.0 * PI * freq_hz / (KB_SI * t_kelvin);
    1.0 / x.exp_m1()
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MeanVector {
    pub mx: f64,
    pub mp: f64,
}

impl MeanVector {
    pub const ZERO: MeanVector = MeanVector { mx: 0.0, mp: 0.0 };

    pub fn new(mx: f64, mp: f64) -> Self {
        Self { mx, mp }
    }

    pub fn is_finite(&self) -> bool {
        self.mx.is_finite() && self.mp.is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianMoments {
    pub mean: MeanVector,
    pub cov: CovarianceMatrix,
}

impl GaussianMoments {
    pub fn new(mean: MeanVector, cov: CovarianceMatrix) -> Self {
        Self { mean, cov }
    }

    pub fn centered(cov: CovarianceMatrix) -> Self {
        Self { mean: MeanVector::ZERO, cov }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.mean.is_finite() {
            return Err(Error::NonPositive(format!("non-finite mean {:?}", self.mean)));
        }
        validate(&self.cov, false)
    }
}

/// Checks positivity and, unless `allow_sub_heisenberg`, the uncertainty
/// relation `det σ ≥ 1/4`. Estimator covariances only need to be positive
/// semidefinite.
pub fn validate(cov: &CovarianceMatrix, allow_sub_heisenberg: bool) -> Result<()> {
    if !cov.is_finite() {
        return Err(Error::NonPositive(format!("non-finite entries {cov:?}")));
    }
    if allow_sub_heisenberg {
        let tol = 1e-14 * cov.max_abs().max(1.0);
        if cov.xx < -tol || cov.pp < -tol || cov.det() < -tol * cov.max_abs().max(1.0) {
            return Err(Error::NonPositive(format!("not positive semidefinite: {cov:?}")));
        }
        return Ok(());
    }
    if !(cov.xx > 0.0 && cov.pp > 0.0) {
        return Err(Error::NonPositive(format!("variances must be > 0: {cov:?}")));
    }
    let det = cov.det();
    if det < 0.25 - HEISENBERG_SLACK {
        return Err(Error::HeisenbergViolation { det });
    }
    Ok(())
}

/// Symplectic eigenvalue `ν = √det σ`, clamped to ½ from below.
pub fn symplectic_eigenvalue(cov: &CovarianceMatrix) -> f64 {
    cov.det().max(0.25).sqrt()
}

fn is_pure(nu: f64) -> bool {
    nu - 0.5 <= PURE_STATE_TOL
}

/// `f(ν) = (ν+½)ln(ν+½) − (ν−½)ln(ν−½)`, zero for pure states.
pub fn entropy_of_nu(nu: f64) -> f64 {
    if is_pure(nu) {
        return 0.0;
    }
    let x = nu - 0.5;
    // (x+1) ln(1 + 1/x) + ln x, stable for large ν
    (x + 1.0) * (1.0 / x).ln_1p() + x.ln()
}

/// `f′(ν) = ln((ν+½)/(ν−½)) = ω/T_G`. Infinite for pure states.
pub fn entropy_slope(nu: f64) -> f64 {
    if is_pure(nu) {
        return f64::INFINITY;
    }
    (1.0 / (nu - 0.5)).ln_1p()
}

/// Von Neumann entropy (nats) of the Gaussian state with covariance `cov`.
pub fn entropy(cov: &CovarianceMatrix) -> Result<f64> {
    validate(cov, false)?;
    Ok(entropy_of_nu(symplectic_eigenvalue(cov)))
}

/// Entropy production rate `dS/dt = f′(ν)/(2ν) · tr[adj(σ) σ̇]` for a
/// covariance moving at rate `rate`. Returns 0 for a pure state whose
/// determinant is stationary.
pub fn entropy_rate(cov: &CovarianceMatrix, rate: &Sym2) -> f64 {
    let nu = symplectic_eigenvalue(cov);
    let ddet = cov.adjugate().trace_product(rate);
    if is_pure(nu) {
        let scale = cov.max_abs() * rate.max_abs();
        if ddet.abs() <= 1e-12 * scale.max(f64::MIN_POSITIVE) {
            return 0.0;
        }
        return f64::INFINITY.copysign(ddet);
    }
    entropy_slope(nu) / (2.0 * nu) * ddet
}

/// Squeezed-thermal view of a Gaussian covariance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThermalDecomposition {
    /// Symplectic eigenvalue √det.
    pub nu: f64,
    /// Temperature of the underlying Gibbs state.
    pub tg: f64,
    /// Squeezing magnitude, `e^{2r} = σ_uu/ν`.
    pub r: f64,
    /// Angle of the major eigen-direction from the x axis.
    pub theta: f64,
    pub sigma_uu: f64,
    pub sigma_vv: f64,
    /// Kinetic temperature along `u_vec` (the wide direction).
    pub tu: f64,
    /// Kinetic temperature along `v_vec`.
    pub tv: f64,
    pub u_vec: [f64; 2],
    pub v_vec: [f64; 2],
}

/// Eigen-decomposes `cov` and assigns kinetic temperatures
/// `T_u = (σ_uu/ν)·T_G`, `T_v = (σ_vv/ν)·T_G`.
///
/// Degenerate eigenvalues give `θ = 0`. Pure states (ν within
/// [`PURE_STATE_TOL`] of ½) have all temperatures zero.
pub fn decompose(cov: &CovarianceMatrix, params: &SystemParams) -> Result<ThermalDecomposition> {
    validate(cov, false)?;
    let nu = symplectic_eigenvalue(cov);
    let half_diff = 0.5 * (cov.xx - cov.pp);
    let mean = 0.5 * cov.trace();
    let radius = half_diff.hypot(cov.xp);
    let sigma_uu = mean + radius;
    // product form keeps σ_uu·σ_vv = det to rounding
    let sigma_vv = cov.det() / sigma_uu;
    let theta = if radius == 0.0 { 0.0 } else { 0.5 * cov.xp.atan2(half_diff) };
    let (s, c) = theta.sin_cos();
    let u_vec = [c, s];
    let v_vec = [-s, c];
    let r = 0.5 * (sigma_uu / nu).ln();
    let tg = if is_pure(nu) { 0.0 } else { params.omega / entropy_slope(nu) };
    Ok(ThermalDecomposition {
        nu,
        tg,
        r,
        theta,
        sigma_uu,
        sigma_vv,
        tu: sigma_uu / nu * tg,
        tv: sigma_vv / nu * tg,
        u_vec,
        v_vec,
    })
}

/// Mean number of quanta `½(σ_xx + σ_pp + m_x² + m_p²) − ½`.
pub fn occupation(moments: &GaussianMoments) -> f64 {
    let m = &moments.mean;
    0.5 * (moments.cov.trace() + m.mx * m.mx + m.mp * m.mp) - 0.5
}
