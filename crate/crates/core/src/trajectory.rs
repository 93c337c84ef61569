//! Stochastic trajectories of the conditional means under Kalman-filtered or
//! direct feedback, and reproducible parallel ensembles over them.
//!
//! Means advance by Euler–Maruyama; the (deterministic, shared) conditional
//! covariance advances by classical RK4. Each trajectory owns a ChaCha8
//! stream selected by `(seed, trajectory index)`, and per-trajectory results
//! are reduced in index order, so output never depends on scheduling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::dynamics::{
    conditional_stages, direct_noise_vector, drift_eigenvalues, estimator_drift, FeedbackKind, FeedbackLaw, Scheme,
};
use crate::error::{Error, Result};
use crate::gaussian::{CovarianceMatrix, MeanVector, SystemParams};
use crate::linalg::Sym2;

/// Largest allowed `dt · rate` for the fastest deterministic rate.
pub const STIFFNESS_LIMIT: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimConfig {
    /// Time step in units of `1/ω`.
    pub dt: f64,
    pub n_steps: usize,
    pub n_traj: usize,
    /// Steps discarded before sampling; `None` picks
    /// [`default_burn_in`].
    pub burn_in: Option<usize>,
    pub seed: u64,
    /// Worker threads; 0 means one per available CPU.
    pub workers: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self { dt: 1e-3, n_steps: 20_000, n_traj: 1_000, burn_in: None, seed: 0, workers: 0 }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::InvalidParameter { name: "dt", reason: format!("must be positive, got {}", self.dt) });
        }
        if self.n_traj == 0 {
            return Err(Error::InvalidParameter { name: "n_traj", reason: "must be at least 1".into() });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryState {
    pub mean_c: MeanVector,
    pub cov_c: CovarianceMatrix,
    pub t: f64,
}

/// Wiener increments for one step. Only the dual scheme reads `dw[1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Increments {
    pub dt: f64,
    pub dw: [f64; 2],
}

/// Result of one step: the new state and the measurement record increment
/// `dy` (NaN when nothing is measured).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Step {
    pub state: TrajectoryState,
    pub dy: f64,
}

/// One RK4 step of the conditional Riccati flow.
pub fn advance_cov_c(cov_c: &Sym2, dt: f64, params: &SystemParams, scheme: Scheme) -> Sym2 {
    let f = |s: &Sym2| conditional_stages(s, params, scheme).total();
    let k1 = f(cov_c);
    let k2 = f(&(*cov_c + k1.scale(0.5 * dt)));
    let k3 = f(&(*cov_c + k2.scale(0.5 * dt)));
    let k4 = f(&(*cov_c + k3.scale(dt)));
    *cov_c + (k1 + k2.scale(2.0) + k3.scale(2.0) + k4).scale(dt / 6.0)
}

/// Noise added to the conditional means, `Σ_j g_j dW_j`, and the record
/// increment for the given pre-step `mx`.
fn innovation(cov_c: &Sym2, mx: f64, inc: &Increments, params: &SystemParams, scheme: Scheme) -> ([f64; 2], f64) {
    let keta = params.k * params.eta;
    let [dw1, dw2] = inc.dw;
    let record = |dw: f64, norm: f64| if norm > 0.0 { mx * inc.dt + dw / norm } else { f64::NAN };
    match scheme {
        Scheme::QndPosition | Scheme::PureMeasurement => {
            let s = (8.0 * keta).sqrt();
            ([s * cov_c.xx * dw1, s * cov_c.xp * dw1], record(dw1, s))
        }
        Scheme::AnnihilationHomodyne => {
            let s = 2.0 * keta.sqrt();
            ([s * (cov_c.xx - 0.5) * dw1, s * cov_c.xp * dw1], record(dw1, (8.0 * keta).sqrt()))
        }
        Scheme::DualNoDamp => {
            let s = (2.0 * keta).sqrt();
            let dx = s * ((cov_c.xx - 0.5) * dw1 + (cov_c.xx + 0.5) * dw2);
            let dp = s * cov_c.xp * (dw1 + dw2);
            let norm = 2.0 * keta.sqrt();
            ([dx, dp], 0.5 * (record(dw1, norm) + record(dw2, norm)))
        }
    }
}

fn mean_step(state: &TrajectoryState, drift: &crate::linalg::Mat2, noise: [f64; 2], dt: f64) -> MeanVector {
    let m = [state.mean_c.mx, state.mean_c.mp];
    let a = drift.apply(m);
    MeanVector::new(m[0] + a[0] * dt + noise[0], m[1] + a[1] * dt + noise[1])
}

/// Largest deterministic rate the explicit step must resolve.
pub fn stiffness_rate(cov_c: &Sym2, law: &FeedbackLaw, params: &SystemParams, scheme: Scheme) -> f64 {
    let eig = drift_eigenvalues(law, params, scheme).iter().map(|z| z.norm()).fold(0.0, f64::max);
    let conditioning = scheme
        .channels(params)
        .iter()
        .map(|&(w, offset)| w * (cov_c.xx + offset).abs())
        .sum::<f64>();
    eig.max(conditioning)
}

fn check_stiffness(dt: f64, cov_c: &Sym2, law: &FeedbackLaw, params: &SystemParams, scheme: Scheme) -> Result<()> {
    let product = dt * stiffness_rate(cov_c, law, params, scheme);
    if product > STIFFNESS_LIMIT {
        return Err(Error::StiffnessGuard { product, limit: STIFFNESS_LIMIT });
    }
    Ok(())
}

/// One Euler–Maruyama step of the conditional means under a Kalman law.
pub fn kalman_step(
    state: &TrajectoryState,
    inc: &Increments,
    law: &FeedbackLaw,
    params: &SystemParams,
    scheme: Scheme,
) -> Result<Step> {
    if !law.is_kalman() {
        return Err(Error::UnsupportedEstimator { op: "kalman_step" });
    }
    check_stiffness(inc.dt, &state.cov_c, law, params, scheme)?;
    Ok(kalman_step_unchecked(state, inc, law, params, scheme, advance_cov_c(&state.cov_c, inc.dt, params, scheme)))
}

fn kalman_step_unchecked(
    state: &TrajectoryState,
    inc: &Increments,
    law: &FeedbackLaw,
    params: &SystemParams,
    scheme: Scheme,
    next_cov: Sym2,
) -> Step {
    let drift = estimator_drift(law, params, scheme);
    let (noise, dy) = innovation(&state.cov_c, state.mean_c.mx, inc, params, scheme);
    Step {
        state: TrajectoryState { mean_c: mean_step(state, &drift, noise, inc.dt), cov_c: next_cov, t: state.t + inc.dt },
        dy,
    }
}

/// One step under direct feedback of the QND record: the conditional update,
/// then the kick `(δm_x, δm_p) = −(a_x, b_x)·dy` from the same increment.
/// The kick coefficients are constant, so the Stratonovich product equals
/// its Itô (left-point) evaluation.
pub fn direct_step(state: &TrajectoryState, inc: &Increments, law: &FeedbackLaw, params: &SystemParams) -> Result<Step> {
    if law.kind != FeedbackKind::Direct {
        return Err(Error::InvalidParameter { name: "law", reason: "direct_step requires a Direct feedback law".into() });
    }
    let scheme = Scheme::QndPosition;
    direct_noise_vector(&state.cov_c, law, params)?;
    check_stiffness(inc.dt, &state.cov_c, law, params, scheme)?;
    Ok(direct_step_unchecked(state, inc, law, params, advance_cov_c(&state.cov_c, inc.dt, params, scheme)))
}

fn direct_step_unchecked(
    state: &TrajectoryState,
    inc: &Increments,
    law: &FeedbackLaw,
    params: &SystemParams,
    next_cov: Sym2,
) -> Step {
    let scheme = Scheme::QndPosition;
    let drift = estimator_drift(&FeedbackLaw::none(), params, scheme);
    let (noise, dy) = innovation(&state.cov_c, state.mean_c.mx, inc, params, scheme);
    let mut mean = mean_step(state, &drift, noise, inc.dt);
    let (a_x, b_x) = (law.gains.a_x, law.gains.b_x);
    if a_x != 0.0 || b_x != 0.0 {
        mean.mx -= a_x * dy;
        mean.mp -= b_x * dy;
    }
    Step { state: TrajectoryState { mean_c: mean, cov_c: next_cov, t: state.t + inc.dt }, dy }
}

/// Default burn-in: `10 / min(γ_eff, g)` in steps, with `γ_eff` the
/// slowest stability rate and `g` the largest gain (ignored when zero).
pub fn default_burn_in(dt: f64, law: &FeedbackLaw, params: &SystemParams, scheme: Scheme) -> usize {
    let slowest = drift_eigenvalues(law, params, scheme).iter().map(|z| z.re.abs()).fold(f64::INFINITY, f64::min);
    let g = law.gain_scale();
    let rate = if g > 0.0 { slowest.min(g) } else { slowest };
    let steps = 10.0 / rate / dt;
    if steps.is_finite() {
        steps.ceil() as usize
    } else {
        usize::MAX
    }
}

/// One sampled row of a trajectory.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryRecord {
    pub t: f64,
    pub mean: MeanVector,
    pub cov_c: Sym2,
    /// Record increment of the step that produced this row (NaN at `t = 0`).
    pub dy: f64,
}

/// Runs a single trajectory and hands each post-step state to `visit`.
/// `cov_path[i]` is the shared conditional covariance at step `i`.
fn drive(
    index: usize,
    config: &SimConfig,
    law: &FeedbackLaw,
    params: &SystemParams,
    scheme: Scheme,
    cov_path: &[Sym2],
    mut visit: impl FnMut(usize, &TrajectoryState, &TrajectoryState, f64),
) {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(index as u64);
    let sqrt_dt = config.dt.sqrt();
    let dual = scheme == Scheme::DualNoDamp;
    let mut state = TrajectoryState { mean_c: MeanVector::ZERO, cov_c: cov_path[0], t: 0.0 };
    for step in 0..config.n_steps {
        let dw1: f64 = rng.sample::<f64, _>(StandardNormal) * sqrt_dt;
        let dw2: f64 = if dual { rng.sample::<f64, _>(StandardNormal) * sqrt_dt } else { 0.0 };
        let inc = Increments { dt: config.dt, dw: [dw1, dw2] };
        let next_cov = cov_path[step + 1];
        let out = if law.is_kalman() {
            kalman_step_unchecked(&state, &inc, law, params, scheme, next_cov)
        } else {
            direct_step_unchecked(&state, &inc, law, params, next_cov)
        };
        visit(step, &state, &out.state, out.dy);
        state = out.state;
    }
}

/// Validates inputs and precomputes the shared `σ_c` path from `cov_c0`.
fn prepare(
    config: &SimConfig,
    cov_c0: &Sym2,
    law: &FeedbackLaw,
    params: &SystemParams,
    scheme: Scheme,
) -> Result<Vec<Sym2>> {
    config.validate()?;
    params.validate()?;
    crate::gaussian::validate(cov_c0, false)?;
    if !law.is_kalman() {
        if scheme != Scheme::QndPosition {
            return Err(Error::UnsupportedScheme { op: "direct feedback", scheme });
        }
        direct_noise_vector(cov_c0, law, params)?;
    }
    let mut path = Vec::with_capacity(config.n_steps + 1);
    let mut cov = *cov_c0;
    path.push(cov);
    for _ in 0..config.n_steps {
        check_stiffness(config.dt, &cov, law, params, scheme)?;
        cov = advance_cov_c(&cov, config.dt, params, scheme);
        path.push(cov);
    }
    Ok(path)
}

/// Samples of a single trajectory, every `stride` steps, starting at
/// `cov_c0` with zero means.
pub fn trajectory_records(
    index: usize,
    config: &SimConfig,
    cov_c0: &Sym2,
    law: &FeedbackLaw,
    params: &SystemParams,
    scheme: Scheme,
    stride: usize,
) -> Result<Vec<TrajectoryRecord>> {
    let path = prepare(config, cov_c0, law, params, scheme)?;
    let stride = stride.max(1);
    let mut rows = vec![TrajectoryRecord { t: 0.0, mean: MeanVector::ZERO, cov_c: path[0], dy: f64::NAN }];
    drive(index, config, law, params, scheme, &path, |step, _, next, dy| {
        if (step + 1) % stride == 0 {
            rows.push(TrajectoryRecord { t: next.t, mean: next.mean_c, cov_c: next.cov_c, dy });
        }
    });
    Ok(rows)
}

/// Time averages of one trajectory over its post-burn-in samples.
#[derive(Debug, Clone, Copy, Default)]
struct TrajectorySummary {
    xx: f64,
    pp: f64,
    xp: f64,
    mx: f64,
    mp: f64,
    innovation: f64,
}

impl TrajectorySummary {
    fn fields(&self) -> [f64; 6] {
        [self.xx, self.pp, self.xp, self.mx, self.mp, self.innovation]
    }
}

/// Sample mean with its standard error across trajectories.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub mean: f64,
    /// NaN when only one trajectory was run.
    pub se: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnsembleStats {
    pub n_traj: usize,
    pub burn_in: usize,
    /// Post-burn-in samples per trajectory.
    pub samples_per_traj: usize,
    /// Second moments of the conditional means about zero.
    pub sigma_xx_m: Estimate,
    pub sigma_pp_m: Estimate,
    pub sigma_xp_m: Estimate,
    pub mean_x: Estimate,
    pub mean_p: Estimate,
    /// `⟨n⟩ = ½(tr σ_c + ⟨m_x²⟩ + ⟨m_p²⟩) − ½` with `σ_c` at the final step.
    pub occupation: Estimate,
    /// Sample variance of `(dy − m_x dt)/√dt`; NaN when nothing is measured.
    pub innovation_variance: Estimate,
    /// Shared conditional covariance at the final step.
    pub cov_c: Sym2,
}

impl EnsembleStats {
    pub fn sigma_m(&self) -> Sym2 {
        Sym2::new(self.sigma_xx_m.mean, self.sigma_pp_m.mean, self.sigma_xp_m.mean)
    }
}

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default)]
struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

fn estimate(values: impl Iterator<Item = f64> + Clone, n: usize) -> Estimate {
    let mut s = CompensatedSum::default();
    values.clone().for_each(|v| s.add(v));
    let mean = s.value() / n as f64;
    if n < 2 {
        return Estimate { mean, se: f64::NAN };
    }
    let mut sq = CompensatedSum::default();
    values.for_each(|v| sq.add((v - mean) * (v - mean)));
    let var = sq.value() / (n - 1) as f64;
    Estimate { mean, se: (var / n as f64).sqrt() }
}

/// Runs `config.n_traj` independent trajectories from the steady conditional
/// covariance `cov_c0` and zero means, and reduces their time-averaged
/// statistics.
pub fn run_ensemble(
    config: &SimConfig,
    cov_c0: &Sym2,
    law: &FeedbackLaw,
    params: &SystemParams,
    scheme: Scheme,
) -> Result<EnsembleStats> {
    let path = prepare(config, cov_c0, law, params, scheme)?;
    let burn_in = config.burn_in.unwrap_or_else(|| default_burn_in(config.dt, law, params, scheme));
    if burn_in >= config.n_steps {
        return Err(Error::EmptySample { burn_in, n_steps: config.n_steps });
    }
    let samples = config.n_steps - burn_in;
    let inv_dt = 1.0 / config.dt;
    let run_one = |index: usize| -> Result<TrajectorySummary> {
        let mut acc = TrajectorySummary::default();
        drive(index, config, law, params, scheme, &path, |step, prev, next, dy| {
            if step < burn_in {
                return;
            }
            let m = next.mean_c;
            acc.xx += m.mx * m.mx;
            acc.pp += m.mp * m.mp;
            acc.xp += m.mx * m.mp;
            acc.mx += m.mx;
            acc.mp += m.mp;
            let r = dy - prev.mean_c.mx * config.dt;
            acc.innovation += r * r * inv_dt;
        });
        let n = samples as f64;
        let avg = TrajectorySummary {
            xx: acc.xx / n,
            pp: acc.pp / n,
            xp: acc.xp / n,
            mx: acc.mx / n,
            mp: acc.mp / n,
            innovation: acc.innovation / n,
        };
        if avg.fields().iter().take(5).all(|v| v.is_finite()) {
            Ok(avg)
        } else {
            Err(Error::NonPositive("trajectory means diverged".into()))
        }
    };
    let results: Vec<Result<TrajectorySummary>> = {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.workers)
            .build()
            .map_err(|e| Error::InvalidParameter { name: "workers", reason: e.to_string() })?;
        pool.install(|| (0..config.n_traj).into_par_iter().map(run_one).collect())
    };
    let mut summaries = Vec::with_capacity(results.len());
    for (index, r) in results.into_iter().enumerate() {
        summaries.push(r.map_err(|e| Error::Trajectory { index, source: Box::new(e) })?);
    }
    let n = summaries.len();
    let field = |i: usize| summaries.iter().map(move |s| s.fields()[i]);
    let cov_c = *path.last().expect("path holds the initial covariance");
    let occupation = estimate(summaries.iter().map(|s| 0.5 * (cov_c.trace() + s.xx + s.pp) - 0.5), n);
    Ok(EnsembleStats {
        n_traj: n,
        burn_in,
        samples_per_traj: samples,
        sigma_xx_m: estimate(field(0), n),
        sigma_pp_m: estimate(field(1), n),
        sigma_xp_m: estimate(field(2), n),
        mean_x: estimate(field(3), n),
        mean_p: estimate(field(4), n),
        occupation,
        innovation_variance: estimate(field(5), n),
        cov_c,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{steady_sigma_c, steady_sigma_m};
    use approx::assert_relative_eq;

    #[test]
    fn free_rotation_step() {
        let p = SystemParams::new(1.0, 0.0, 0.0, 0.0, 1.0).unwrap();
        let s = TrajectoryState { mean_c: MeanVector::new(0.3, -0.7), cov_c: Sym2::scaled_identity(0.5), t: 0.0 };
        let dt = 1e-3;
        let out = kalman_step(&s, &Increments { dt, dw: [0.0; 2] }, &FeedbackLaw::none(), &p, Scheme::QndPosition)
            .unwrap();
        assert_relative_eq!(out.state.mean_c.mx, 0.3 + (-0.7) * dt, max_relative = 1e-15);
        assert_relative_eq!(out.state.mean_c.mp, -0.7 - 0.3 * dt, max_relative = 1e-15);
        assert!(out.dy.is_nan());
    }

    #[test]
    fn qnd_step_matches_termwise_update() {
        let p = SystemParams::new(1.0, 0.1, 2.0, 0.3, 0.6).unwrap();
        let law = FeedbackLaw::kalman_xp(1.5);
        let s = TrajectoryState { mean_c: MeanVector::new(0.3, -0.7), cov_c: Sym2::new(1.2, 1.4, 0.1), t: 0.0 };
        let (dt, dw) = (1e-3, 0.02);
        let out = kalman_step(&s, &Increments { dt, dw: [dw, 0.0] }, &law, &p, Scheme::QndPosition).unwrap();
        let r = (8.0 * p.k * p.eta).sqrt();
        let (mx, mp) = (0.3, -0.7);
        let ex = mx + (p.omega * mp - 0.5 * p.gamma * mx - 1.5 * mx) * dt + r * 1.2 * dw;
        let ep = mp + (-p.omega * mx - 0.5 * p.gamma * mp - 1.5 * mp) * dt + r * 0.1 * dw;
        assert_relative_eq!(out.state.mean_c.mx, ex, max_relative = 1e-14);
        assert_relative_eq!(out.state.mean_c.mp, ep, max_relative = 1e-14);
        assert_relative_eq!(out.dy, mx * dt + dw / r, max_relative = 1e-14);
    }

    #[test]
    fn direct_zero_gain_equals_kalman_zero_gain() {
        let p = SystemParams::new(1.0, 0.1, 2.0, 0.3, 0.6).unwrap();
        let s = TrajectoryState { mean_c: MeanVector::new(0.3, -0.7), cov_c: Sym2::new(1.2, 1.4, 0.1), t: 0.0 };
        let inc = Increments { dt: 1e-3, dw: [0.013, 0.0] };
        let a = direct_step(&s, &inc, &FeedbackLaw::direct(0.0, 0.0), &p).unwrap();
        let b = kalman_step(&s, &inc, &FeedbackLaw::none(), &p, Scheme::QndPosition).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn direct_noise_free_step_follows_closed_drift() {
        let p = SystemParams::new(1.0, 0.1, 2.0, 0.3, 0.6).unwrap();
        let law = FeedbackLaw::direct(0.8, -0.3);
        let s = TrajectoryState { mean_c: MeanVector::new(0.3, -0.7), cov_c: Sym2::new(1.2, 1.4, 0.1), t: 0.0 };
        let dt = 1e-3;
        let out = direct_step(&s, &Increments { dt, dw: [0.0; 2] }, &law, &p).unwrap();
        let d = estimator_drift(&law, &p, Scheme::QndPosition).apply([0.3, -0.7]);
        assert_relative_eq!(out.state.mean_c.mx, 0.3 + d[0] * dt, max_relative = 1e-14);
        assert_relative_eq!(out.state.mean_c.mp, -0.7 + d[1] * dt, max_relative = 1e-14);
    }

    #[test]
    fn stiffness_guard_trips() {
        let p = SystemParams::new(1.0, 0.1, 2.0, 0.3, 0.6).unwrap();
        let s = TrajectoryState { mean_c: MeanVector::ZERO, cov_c: Sym2::identity(), t: 0.0 };
        let e = kalman_step(&s, &Increments { dt: 0.1, dw: [0.0; 2] }, &FeedbackLaw::kalman_xp(100.0), &p, Scheme::QndPosition);
        assert!(matches!(e, Err(Error::StiffnessGuard { .. })));
    }

    #[test]
    fn no_measurement_no_noise() {
        let p = SystemParams::new(1.0, 0.2, 1.0, 0.0, 0.5).unwrap();
        let cfg = SimConfig { dt: 1e-2, n_steps: 200, n_traj: 4, burn_in: Some(100), seed: 7, workers: 1 };
        let st = run_ensemble(&cfg, &Sym2::scaled_identity(1.5), &FeedbackLaw::none(), &p, Scheme::QndPosition).unwrap();
        assert_eq!(st.sigma_m(), Sym2::ZERO);
    }

    #[test]
    fn empty_sample_is_an_error() {
        let p = SystemParams::reference_defaults();
        let cfg = SimConfig { dt: 1e-3, n_steps: 10, n_traj: 1, burn_in: Some(10), seed: 1, workers: 1 };
        let e = run_ensemble(&cfg, &Sym2::identity(), &FeedbackLaw::kalman_xp(5.0), &p, Scheme::QndPosition);
        assert!(matches!(e, Err(Error::EmptySample { .. })));
    }

    #[test]
    fn single_trajectory_has_nan_standard_error() {
        let p = SystemParams::reference_defaults();
        let sc = steady_sigma_c(&p, Scheme::QndPosition).unwrap();
        let cfg = SimConfig { dt: 1e-3, n_steps: 100, n_traj: 1, burn_in: Some(10), seed: 1, workers: 1 };
        let st = run_ensemble(&cfg, &sc, &FeedbackLaw::kalman_xp(5.0), &p, Scheme::QndPosition).unwrap();
        assert!(st.sigma_xx_m.se.is_nan() && st.sigma_xx_m.mean.is_finite());
    }

    #[test]
    fn small_ensemble_tracks_lyapunov_prediction() {
        let p = SystemParams::reference_defaults();
        let law = FeedbackLaw::kalman_xp(5.0);
        let sc = steady_sigma_c(&p, Scheme::QndPosition).unwrap();
        let sm = steady_sigma_m(&sc, &law, &p, Scheme::QndPosition).unwrap();
        let cfg = SimConfig { dt: 1e-3, n_steps: 4_000, n_traj: 400, burn_in: None, seed: 11, workers: 1 };
        let st = run_ensemble(&cfg, &sc, &law, &p, Scheme::QndPosition).unwrap();
        for (est, want) in [(st.sigma_xx_m, sm.xx), (st.sigma_pp_m, sm.pp), (st.sigma_xp_m, sm.xp)] {
            assert!((est.mean - want).abs() <= 4.0 * est.se, "{est:?} vs {want}");
        }
        assert!((st.cov_c - sc).max_abs() < 1e-12);
    }
}
