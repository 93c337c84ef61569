//! Heat, work, kinetic temperatures and information rates at an operating
//! point, and the signed margins of the second-law-type inequalities.
//!
//! Every rate is evaluated analytically from stage matrices via
//! `d det σ = tr[adj(σ) dσ]`; nothing here depends on a time step.

use crate::dynamics::{
    averaged_rhs, estimator_rhs, sigma_c_rhs, FeedbackKind, FeedbackLaw, Scheme, StageRates,
};
use crate::error::{Error, Result};
use crate::gaussian::{
    decompose, entropy_rate, occupation, symplectic_eigenvalue, validate, CovarianceMatrix, GaussianMoments,
    SystemParams,
};
use crate::linalg::Sym2;

/// Residual (relative to stage magnitudes) below which a point is steady.
pub const STEADY_TOL: f64 = 1e-10;

/// Heat flow from the bath into the oscillator, `ωγ(n̄ − ⟨n⟩)`.
pub fn heat_rate(moments: &GaussianMoments, params: &SystemParams) -> f64 {
    let m = &moments.mean;
    let second = 0.5 * (moments.cov.trace() + m.mx * m.mx + m.mp * m.mp);
    params.omega * params.gamma * ((params.nbar + 0.5) - second)
}

/// Work extracted by feedback and measurement, resolved along the
/// eigen-directions `u` (wide) and `v` of `Σ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorkRates {
    pub w_u: f64,
    pub w_v: f64,
    pub w_ext: f64,
}

/// Covariance rate `M` produced by feedback and measurement backaction on
/// the averaged state. Extracted work is `−(ω/2)·tr M`.
pub fn work_source(
    sigma: &CovarianceMatrix,
    cov_m: &CovarianceMatrix,
    law: &FeedbackLaw,
    params: &SystemParams,
    scheme: Scheme,
) -> Result<Sym2> {
    let k = params.k;
    let backaction = match scheme {
        Scheme::QndPosition | Scheme::PureMeasurement => Sym2::diag(0.0, 2.0 * k),
        Scheme::AnnihilationHomodyne => Sym2::scaled_identity(k) - sigma.scale(2.0 * k),
        Scheme::DualNoDamp => Sym2::scaled_identity(k),
    };
    let drift = law.drift();
    let feedback = match law.kind {
        FeedbackKind::Direct => {
            let rate = params.info_rate();
            let (a_x, b_x) = (law.gains.a_x, law.gains.b_x);
            let kick = if rate == 0.0 {
                if a_x != 0.0 || b_x != 0.0 {
                    return Err(Error::EfficiencyZero);
                }
                Sym2::ZERO
            } else {
                Sym2::outer(a_x, b_x).scale(1.0 / rate)
            };
            drift.lyapunov(sigma) + kick
        }
        _ => drift.lyapunov(cov_m),
    };
    Ok(feedback + backaction)
}

pub fn work_rates(
    sigma: &CovarianceMatrix,
    cov_m: &CovarianceMatrix,
    law: &FeedbackLaw,
    params: &SystemParams,
    scheme: Scheme,
) -> Result<WorkRates> {
    let d = decompose(sigma, params)?;
    let m = work_source(sigma, cov_m, law, params, scheme)?;
    let half = 0.5 * params.omega;
    Ok(WorkRates { w_u: -half * m.quad(d.u_vec), w_v: -half * m.quad(d.v_vec), w_ext: -half * m.trace() })
}

/// `Ẇ_u/T_u + Ẇ_v/T_v` via eigen-projection onto the kinetic temperatures.
pub fn kinetic_ratio(sigma: &CovarianceMatrix, work: &WorkRates, params: &SystemParams) -> Result<f64> {
    let d = decompose(sigma, params)?;
    Ok(work.w_u / d.tu + work.w_v / d.tv)
}

/// `Ẇ_u/T_u + Ẇ_v/T_v` via the determinant flow,
/// `−f′(ν)/(2ν)·tr[adj(Σ) M]`, which needs no eigen-decomposition.
pub fn kinetic_ratio_det(sigma: &CovarianceMatrix, source: &Sym2) -> Result<f64> {
    validate(sigma, false)?;
    Ok(-entropy_rate(sigma, source))
}

fn require_qnd(op: &'static str, scheme: Scheme) -> Result<()> {
    match scheme {
        Scheme::QndPosition | Scheme::PureMeasurement => Ok(()),
        _ => Err(Error::UnsupportedScheme { op, scheme }),
    }
}

/// QC-transfer entropy rate: the entropy the measurement stage removes from
/// the conditional state.
pub fn qct_rate(cov_c: &CovarianceMatrix, params: &SystemParams, scheme: Scheme) -> Result<f64> {
    let stages = sigma_c_rhs(cov_c, params, scheme)?;
    Ok(-entropy_rate(cov_c, &stages.measurement()))
}

/// Entropy rate of the conditional state due to backaction alone.
pub fn s_ba_rate(cov_c: &CovarianceMatrix, params: &SystemParams, scheme: Scheme) -> Result<f64> {
    require_qnd("s_ba_rate", scheme)?;
    let stages = sigma_c_rhs(cov_c, params, scheme)?;
    Ok(entropy_rate(cov_c, &stages.backaction))
}

/// QC information flow: entropy rate of `Σ` under its full flow minus that
/// of `σ_c` under its non-conditioning stages. Kalman estimators only.
///
/// `σ_m` is recovered as `Σ − σ_c`; at large gains the rounding of that
/// difference is amplified by the feedback stage, so callers holding `σ_m`
/// should prefer [`inequality_report`].
pub fn qci_flow_rate(
    sigma: &CovarianceMatrix,
    cov_c: &CovarianceMatrix,
    law: &FeedbackLaw,
    params: &SystemParams,
    scheme: Scheme,
) -> Result<f64> {
    qci_flow_with(sigma, cov_c, &(*sigma - *cov_c), law, params, scheme)
}

fn qci_flow_with(
    sigma: &CovarianceMatrix,
    cov_c: &CovarianceMatrix,
    cov_m: &CovarianceMatrix,
    law: &FeedbackLaw,
    params: &SystemParams,
    scheme: Scheme,
) -> Result<f64> {
    if !law.is_kalman() {
        return Err(Error::UnsupportedEstimator { op: "qci_flow_rate" });
    }
    require_qnd("qci_flow_rate", scheme)?;
    validate(sigma, false)?;
    let averaged = averaged_rhs(cov_c, cov_m, law, params, scheme)?;
    let c = sigma_c_rhs(cov_c, params, scheme)?;
    let unconditioned = c.bath + c.hamiltonian + c.backaction;
    Ok(entropy_rate(sigma, &averaged.total()) - entropy_rate(cov_c, &unconditioned))
}

/// Occupation floor `½(σ_xx,c + σ_pp,c) − ½` reachable by feedback.
pub fn cooling_limit(cov_c: &CovarianceMatrix) -> f64 {
    0.5 * cov_c.trace() - 0.5
}

/// Signed slack `RHS − LHS` of each inequality; valid means `≥ 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Margins {
    /// `İ_QCT − (Ẇ_u/T_u + Ẇ_v/T_v)`.
    pub qct_kinetic: f64,
    /// `İ_QCT − Ẇ_ext/T`.
    pub qct_work: f64,
    /// `(Ẇ_u/T_u + Ẇ_v/T_v) − Ẇ_ext/T`.
    pub kinetic_work: f64,
    /// `(−İ^S_QCI − Ṡ_BA) − (Ẇ_u/T_u + Ẇ_v/T_v)`; Kalman only.
    pub info_kinetic: Option<f64>,
    /// `İ_QCT − (−İ^S_QCI − Ṡ_BA)`; Kalman only.
    pub qct_info: Option<f64>,
    /// `⟨n⟩ − ⟨n⟩_min`.
    pub occupation: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateReport {
    pub q_dot: f64,
    pub w_ext: f64,
    pub w_u: f64,
    pub w_v: f64,
    pub tu: f64,
    pub tv: f64,
    pub tg: f64,
    /// Bath temperature.
    pub t: f64,
    pub i_qct: f64,
    pub i_qci_s: Option<f64>,
    pub s_ba: Option<f64>,
    pub n_occ: f64,
    pub n_min: f64,
    /// `Ẇ_u/T_u + Ẇ_v/T_v`.
    pub kinetic: f64,
    /// `Ẇ_ext/T`, taken as 0 when both vanish.
    pub w_ext_over_t: f64,
    /// `kinetic / İ_QCT`.
    pub ratio: f64,
    pub margins: Margins,
}

/// Largest relative residual of the `σ_c` and `σ_m` flows at a point.
pub fn steady_residual(
    cov_c: &CovarianceMatrix,
    cov_m: &CovarianceMatrix,
    law: &FeedbackLaw,
    params: &SystemParams,
    scheme: Scheme,
) -> Result<f64> {
    let c: StageRates = sigma_c_rhs(cov_c, params, scheme)?;
    let m = estimator_rhs(cov_m, cov_c, law, params, scheme)?;
    Ok(c.relative_residual().max(m.relative_residual()))
}

/// Every rate and margin at a steady, zero-mean operating point.
pub fn inequality_report(
    sigma: &CovarianceMatrix,
    cov_c: &CovarianceMatrix,
    cov_m: &CovarianceMatrix,
    law: &FeedbackLaw,
    params: &SystemParams,
    scheme: Scheme,
) -> Result<RateReport> {
    validate(sigma, false)?;
    let residual = steady_residual(cov_c, cov_m, law, params, scheme)?;
    if !(residual < STEADY_TOL) {
        return Err(Error::NotSteady { residual });
    }
    let d = decompose(sigma, params)?;
    let work = work_rates(sigma, cov_m, law, params, scheme)?;
    let kinetic = work.w_u / d.tu + work.w_v / d.tv;
    let t = params.temperature();
    let w_ext_over_t = if work.w_ext == 0.0 { 0.0 } else { work.w_ext / t };
    let i_qct = qct_rate(cov_c, params, scheme)?;
    let s_ba = match scheme {
        Scheme::QndPosition | Scheme::PureMeasurement => Some(s_ba_rate(cov_c, params, scheme)?),
        _ => None,
    };
    let i_qci_s = match (law.is_kalman(), s_ba) {
        (true, Some(_)) => Some(qci_flow_with(sigma, cov_c, cov_m, law, params, scheme)?),
        _ => None,
    };
    let info_bound = i_qci_s.zip(s_ba).map(|(q, b)| -q - b);
    let n_occ = occupation(&GaussianMoments::centered(*sigma));
    let n_min = cooling_limit(cov_c);
    Ok(RateReport {
        q_dot: heat_rate(&GaussianMoments::centered(*sigma), params),
        w_ext: work.w_ext,
        w_u: work.w_u,
        w_v: work.w_v,
        tu: d.tu,
        tv: d.tv,
        tg: d.tg,
        t,
        i_qct,
        i_qci_s,
        s_ba,
        n_occ,
        n_min,
        kinetic,
        w_ext_over_t,
        ratio: kinetic / i_qct,
        margins: Margins {
            qct_kinetic: i_qct - kinetic,
            qct_work: i_qct - w_ext_over_t,
            kinetic_work: kinetic - w_ext_over_t,
            info_kinetic: info_bound.map(|b| b - kinetic),
            qct_info: info_bound.map(|b| i_qct - b),
            occupation: n_occ - n_min,
        },
    })
}

/// `İ_QCT` from the stationary `σ_c` alone: at steady state the measurement
/// stage balances the bath (rotation preserves `det`), so
/// `İ_QCT = f′(ν)/(2ν)·tr[adj(σ_c)·bath]`.
pub fn qct_rate_from_bath(cov_c: &CovarianceMatrix, params: &SystemParams) -> f64 {
    let nu = symplectic_eigenvalue(cov_c);
    let g = params.gamma;
    let ddet = params.bath_diffusion() * cov_c.trace() - 2.0 * g * cov_c.det();
    crate::gaussian::entropy_slope(nu) / (2.0 * nu) * ddet
}
