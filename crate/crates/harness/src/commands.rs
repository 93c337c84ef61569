//! Batch operations behind the CLI subcommands and their CSV/text output.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context};
use fbcool_core::dynamics::{steady_sigma_c, steady_state_with, FeedbackKind, FeedbackLaw, Scheme, SteadyState};
use fbcool_core::gaussian::SystemParams;
use fbcool_core::thermo::{cooling_limit, inequality_report, RateReport};
use fbcool_core::trajectory::{run_ensemble, trajectory_records, EnsembleStats, Estimate};
use fbcool_core::Sym2;

use crate::config::{RunConfig, SweepParam};

/// Sweep columns after the abscissa.
pub const SWEEP_FIELDS: [&str; 12] = [
    "n_occ",
    "n_min",
    "w_u_over_Tu_plus_w_v_over_Tv",
    "i_qct",
    "w_ext_over_T",
    "ratio",
    "margin_eq10",
    "margin_eq11",
    "margin_eq12",
    "margin_eq13",
    "margin_eq16",
    "margin_eq17",
];

/// Extra columns of the single-point steady CSV.
pub const STEADY_EXTRA_FIELDS: [&str; 10] = ["q_dot", "w_ext", "w_u", "w_v", "Tu", "Tv", "TG", "T", "i_qci_s", "s_ba"];

/// 17 significant digits, enough to round-trip any `f64`.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_f64).unwrap_or_default()
}

pub fn sweep_fields(r: &RateReport) -> [Option<f64>; 12] {
    let m = &r.margins;
    [
        Some(r.n_occ),
        Some(r.n_min),
        Some(r.kinetic),
        Some(r.i_qct),
        Some(r.w_ext_over_t),
        Some(r.ratio),
        Some(m.qct_kinetic),
        Some(m.qct_work),
        Some(m.kinetic_work),
        m.info_kinetic,
        m.qct_info,
        Some(m.occupation),
    ]
}

fn steady_extra_fields(r: &RateReport) -> [Option<f64>; 10] {
    [Some(r.q_dot), Some(r.w_ext), Some(r.w_u), Some(r.w_v), Some(r.tu), Some(r.tv), Some(r.tg), Some(r.t), r.i_qci_s, r.s_ba]
}

/// Solved operating point with its report.
#[derive(Debug, Clone, Copy)]
pub struct OperatingPoint {
    pub law: FeedbackLaw,
    pub state: SteadyState,
    pub report: RateReport,
}

/// Steady state and rate report for `scheme` at gain `g`, reusing a
/// precomputed steady `σ_c` when given.
pub fn evaluate(
    params: &SystemParams,
    cfg: &RunConfig,
    scheme: Scheme,
    g: f64,
    cov_c: Option<Sym2>,
) -> fbcool_core::Result<OperatingPoint> {
    let law = cfg.feedback.law(g);
    let cov_c = match cov_c {
        Some(c) => c,
        None => steady_sigma_c(params, scheme)?,
    };
    let state = steady_state_with(cov_c, &law, params, scheme)?;
    let report = inequality_report(&state.sigma, &state.cov_c, &state.cov_m, &law, params, scheme)?;
    Ok(OperatingPoint { law, state, report })
}

/// Steady operating point at the configured gain and first scheme.
pub fn steady(cfg: &RunConfig) -> anyhow::Result<OperatingPoint> {
    let params = cfg.system_params().context("invalid system parameters")?;
    let scheme = cfg.scheme();
    evaluate(&params, cfg, scheme, cfg.feedback.g, None)
        .with_context(|| format!("steady state for scheme {scheme} at g = {}", cfg.feedback.g))
}

pub fn write_steady_csv(w: &mut impl Write, cfg: &RunConfig, op: &OperatingPoint) -> std::io::Result<()> {
    let header: Vec<&str> = std::iter::once("g").chain(SWEEP_FIELDS).chain(STEADY_EXTRA_FIELDS).collect();
    writeln!(w, "{}", header.join(","))?;
    let mut row = vec![fmt_f64(cfg.feedback.g)];
    row.extend(sweep_fields(&op.report).into_iter().map(fmt_opt));
    row.extend(steady_extra_fields(&op.report).into_iter().map(fmt_opt));
    writeln!(w, "{}", row.join(","))
}

pub fn steady_text(cfg: &RunConfig, op: &OperatingPoint) -> String {
    let r = &op.report;
    let s = &op.state;
    let mut t = String::new();
    let opt = |x: Option<f64>| x.map_or_else(|| "n/a".to_string(), |v| format!("{v:.10e}"));
    let _ = writeln!(t, "scheme            {}", cfg.scheme());
    let _ = writeln!(t, "feedback          {} (g = {})", cfg.feedback.kind.name(), cfg.feedback.g);
    let g = &op.law.gains;
    let _ = writeln!(t, "gains             a_x = {}, a_p = {}, b_x = {}, b_p = {}", g.a_x, g.a_p, g.b_x, g.b_p);
    for (name, c) in [("sigma_c", s.cov_c), ("sigma_m", s.cov_m), ("Sigma", s.sigma)] {
        let _ = writeln!(t, "{name:<17} xx = {:.10e}  pp = {:.10e}  xp = {:.10e}", c.xx, c.pp, c.xp);
    }
    let rows: [(&str, String); 22] = [
        ("n_occ", format!("{:.10e}", r.n_occ)),
        ("n_min", format!("{:.10e}", r.n_min)),
        ("q_dot", format!("{:.10e}", r.q_dot)),
        ("w_ext", format!("{:.10e}", r.w_ext)),
        ("w_u", format!("{:.10e}", r.w_u)),
        ("w_v", format!("{:.10e}", r.w_v)),
        ("Tu", format!("{:.10e}", r.tu)),
        ("Tv", format!("{:.10e}", r.tv)),
        ("TG", format!("{:.10e}", r.tg)),
        ("T (bath)", format!("{:.10e}", r.t)),
        ("w_u/Tu + w_v/Tv", format!("{:.10e}", r.kinetic)),
        ("w_ext/T", format!("{:.10e}", r.w_ext_over_t)),
        ("i_qct", format!("{:.10e}", r.i_qct)),
        ("i_qci_s", opt(r.i_qci_s)),
        ("s_ba", opt(r.s_ba)),
        ("ratio", format!("{:.10e}", r.ratio)),
        ("margin i_qct - kinetic", format!("{:.10e}", r.margins.qct_kinetic)),
        ("margin i_qct - w_ext/T", format!("{:.10e}", r.margins.qct_work)),
        ("margin kinetic - w_ext/T", format!("{:.10e}", r.margins.kinetic_work)),
        ("margin info - kinetic", opt(r.margins.info_kinetic)),
        ("margin i_qct - info", opt(r.margins.qct_info)),
        ("margin n - n_min", format!("{:.10e}", r.margins.occupation)),
    ];
    for (k, v) in rows {
        let _ = writeln!(t, "{k:<17} {v}");
    }
    t
}

/// One sweep point; failures keep their message and are written as a
/// flagged (all-NaN) row.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub x: f64,
    pub outcome: Result<RateReport, String>,
}

impl SweepRow {
    pub fn is_flagged(&self) -> bool {
        self.outcome.is_err()
    }
}

/// Evaluates every sweep point for `scheme`; never aborts on a bad point.
pub fn sweep(cfg: &RunConfig, scheme: Scheme) -> Vec<SweepRow> {
    // σ_c does not depend on the gain, so a gain sweep solves it once
    let shared = match cfg.sweep.param {
        SweepParam::G => Some(cfg.system_params().and_then(|p| steady_sigma_c(&p, scheme).map(|c| (p, c)))),
        _ => None,
    };
    cfg.sweep
        .values()
        .into_iter()
        .map(|x| {
            let (point_cfg, g) = cfg.at_sweep_value(x);
            let outcome = match &shared {
                Some(Ok((p, c))) => evaluate(p, &point_cfg, scheme, g, Some(*c)),
                Some(Err(e)) => Err(e.clone()),
                None => point_cfg.system_params().and_then(|p| evaluate(&p, &point_cfg, scheme, g, None)),
            };
            SweepRow { x, outcome: outcome.map(|op| op.report).map_err(|e| e.to_string()) }
        })
        .collect()
}

fn sweep_row_cells(row: &SweepRow) -> Vec<String> {
    let mut cells = vec![fmt_f64(row.x)];
    match &row.outcome {
        Ok(r) => cells.extend(sweep_fields(r).into_iter().map(fmt_opt)),
        Err(_) => cells.extend(std::iter::repeat_n(fmt_f64(f64::NAN), SWEEP_FIELDS.len())),
    }
    cells
}

pub fn write_sweep_csv(w: &mut impl Write, param: SweepParam, rows: &[SweepRow]) -> std::io::Result<()> {
    let header: Vec<&str> = std::iter::once(param.name()).chain(SWEEP_FIELDS).collect();
    writeln!(w, "{}", header.join(","))?;
    for row in rows {
        writeln!(w, "{}", sweep_row_cells(row).join(","))?;
    }
    Ok(())
}

/// Sweeps per scheme. A single scheme writes exactly the sweep CSV; several
/// schemes prefix a `scheme` column.
pub fn write_compare_csv(w: &mut impl Write, param: SweepParam, runs: &[(Scheme, Vec<SweepRow>)]) -> std::io::Result<()> {
    if let [(_, rows)] = runs {
        return write_sweep_csv(w, param, rows);
    }
    let header: Vec<&str> = ["scheme", param.name()].into_iter().chain(SWEEP_FIELDS).collect();
    writeln!(w, "{}", header.join(","))?;
    for (scheme, rows) in runs {
        for row in rows {
            writeln!(w, "{},{}", scheme.name(), sweep_row_cells(row).join(","))?;
        }
    }
    Ok(())
}

/// Writes flagged-row diagnostics to `err` and fails if any row is flagged.
pub fn check_rows<'a>(err: &mut impl Write, runs: impl IntoIterator<Item = (Scheme, &'a [SweepRow])>) -> anyhow::Result<()> {
    let mut flagged = 0;
    for (scheme, rows) in runs {
        for row in rows {
            if let Err(msg) = &row.outcome {
                flagged += 1;
                let _ = writeln!(err, "flagged row: scheme {scheme}, x = {}: {msg}", row.x);
            }
        }
    }
    if flagged > 0 {
        bail!("{flagged} sweep row(s) flagged");
    }
    Ok(())
}

/// Ensemble statistics with their deterministic predictions.
#[derive(Debug, Clone, Copy)]
pub struct TrajectorySummary {
    pub stats: EnsembleStats,
    pub prediction: SteadyState,
    pub innovation_variance: f64,
}

pub fn trajectories(cfg: &RunConfig) -> anyhow::Result<TrajectorySummary> {
    let params = cfg.system_params().context("invalid system parameters")?;
    let scheme = cfg.scheme();
    let law = cfg.feedback.law(cfg.feedback.g);
    let cov_c = steady_sigma_c(&params, scheme).context("steady conditional covariance")?;
    let prediction = steady_state_with(cov_c, &law, &params, scheme).context("steady estimator covariance")?;
    let sim = &cfg.sim;
    let stats = run_ensemble(&sim.config, &cov_c, &law, &params, scheme).context("trajectory ensemble")?;
    if let Some(dir) = &sim.dump_dir {
        dump_trajectories(dir, cfg, &cov_c, &law, &params, scheme)?;
    }
    Ok(TrajectorySummary { stats, prediction, innovation_variance: 1.0 / params.info_rate() })
}

fn dump_trajectories(
    dir: &Path,
    cfg: &RunConfig,
    cov_c: &Sym2,
    law: &FeedbackLaw,
    params: &SystemParams,
    scheme: Scheme,
) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    for index in 0..cfg.sim.dump_trajectories.min(cfg.sim.config.n_traj) {
        let rows = trajectory_records(index, &cfg.sim.config, cov_c, law, params, scheme, cfg.sim.dump_stride)?;
        let path = dir.join(format!("trajectory_{index:05}.csv"));
        let mut w = std::io::BufWriter::new(fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?);
        writeln!(w, "t,mx,mp,sxx_c,spp_c,sxp_c,dy")?;
        for r in rows {
            let cells = [r.t, r.mean.mx, r.mean.mp, r.cov_c.xx, r.cov_c.pp, r.cov_c.xp, r.dy].map(fmt_f64);
            writeln!(w, "{}", cells.join(","))?;
        }
        w.flush()?;
    }
    Ok(())
}

pub fn write_trajectory_csv(w: &mut impl Write, s: &TrajectorySummary) -> std::io::Result<()> {
    let st = &s.stats;
    let p = &s.prediction;
    writeln!(w, "quantity,sample,standard_error,prediction,deviation_over_se")?;
    let occ = 0.5 * p.sigma.trace() - 0.5;
    let rows: [(&str, Estimate, f64); 7] = [
        ("sigma_xx_m", st.sigma_xx_m, p.cov_m.xx),
        ("sigma_pp_m", st.sigma_pp_m, p.cov_m.pp),
        ("sigma_xp_m", st.sigma_xp_m, p.cov_m.xp),
        ("mean_x", st.mean_x, 0.0),
        ("mean_p", st.mean_p, 0.0),
        ("occupation", st.occupation, occ),
        ("innovation_variance", st.innovation_variance, s.innovation_variance),
    ];
    for (name, est, pred) in rows {
        let z = (est.mean - pred) / est.se;
        writeln!(w, "{name},{},{},{},{}", fmt_f64(est.mean), fmt_f64(est.se), fmt_f64(pred), fmt_f64(z))?;
    }
    writeln!(w, "n_traj,{},,,", st.n_traj)?;
    writeln!(w, "burn_in_steps,{},,,", st.burn_in)?;
    writeln!(w, "samples_per_trajectory,{},,,", st.samples_per_traj)
}

/// Plain-text summary over the configured parameters and sweep.
pub fn report_text(cfg: &RunConfig) -> anyhow::Result<String> {
    let params = cfg.system_params().context("invalid system parameters")?;
    let mut t = String::new();
    let _ = writeln!(t, "Feedback cooling summary");
    let _ = writeln!(t);
    let _ = writeln!(
        t,
        "parameters: k/omega = {}, eta = {}, nbar = {:.6e}, gamma/omega = {:.6e}, nbar*gamma/omega = {:.6e}",
        params.k,
        params.eta,
        params.nbar,
        params.gamma,
        params.nbar * params.gamma
    );
    let _ = writeln!(t);
    let _ = writeln!(t, "cooling limit <n>_min and information rate i_qct per scheme:");
    for scheme in [Scheme::QndPosition, Scheme::AnnihilationHomodyne, Scheme::DualNoDamp] {
        match steady_sigma_c(&params, scheme) {
            Ok(c) => {
                let i = fbcool_core::thermo::qct_rate(&c, &params, scheme)?;
                let _ = writeln!(t, "  {:<9} n_min = {:.6}  i_qct = {:.6e}", scheme.name(), cooling_limit(&c), i);
            }
            Err(e) => {
                let _ = writeln!(t, "  {:<9} failed: {e}", scheme.name());
            }
        }
    }
    let scheme = cfg.scheme();
    let mut g_cfg = cfg.clone();
    g_cfg.sweep.param = SweepParam::G;
    let _ = writeln!(t);
    let _ = writeln!(
        t,
        "gain sweeps on scheme {scheme}: {} points, g/omega in [{}, {}]{}",
        g_cfg.sweep.points,
        g_cfg.sweep.min,
        g_cfg.sweep.max,
        if g_cfg.sweep.log { " (log)" } else { "" }
    );
    for kind in [FeedbackKind::KalmanXP, FeedbackKind::KalmanXOnly, FeedbackKind::Direct] {
        g_cfg.feedback.kind = kind;
        g_cfg.feedback.overrides = Default::default();
        let rows = sweep(&g_cfg, scheme);
        let ok: Vec<(f64, &RateReport)> = rows.iter().filter_map(|r| r.outcome.as_ref().ok().map(|rep| (r.x, rep))).collect();
        let flagged = rows.len() - ok.len();
        let Some(&(g_last, last)) = ok.last() else {
            let _ = writeln!(t, "  {:<9} all points failed", kind.name());
            continue;
        };
        let (g_best, best) = ok.iter().min_by(|a, b| a.1.n_occ.total_cmp(&b.1.n_occ)).map(|&(g, r)| (g, r)).unwrap();
        let max_ratio = ok.iter().map(|(_, r)| r.ratio).fold(f64::NEG_INFINITY, f64::max);
        let max_wt = ok.iter().map(|(_, r)| r.w_ext_over_t / r.i_qct).fold(f64::NEG_INFINITY, f64::max);
        let _ = writeln!(t, "  {}:", kind.name());
        let _ = writeln!(t, "    at g = {g_last:.4e}: ratio = {:.6}, <n> = {:.6}, <n>_min = {:.6}", last.ratio, last.n_occ, last.n_min);
        let _ = writeln!(t, "    best <n> = {:.6} at g = {g_best:.4e}; max ratio = {max_ratio:.6}; max (w_ext/T)/i_qct = {max_wt:.3e}", best.n_occ);
        if flagged > 0 {
            let _ = writeln!(t, "    {flagged} point(s) failed");
        }
    }
    Ok(t)
}
