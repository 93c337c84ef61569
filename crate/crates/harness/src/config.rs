//! Flat dotted-key run configuration.
//!
//! One `key = value` per line; `#` starts a comment; `[section]` lines
//! prefix the keys that follow. A bare `params` leaf such as `eta` is also
//! accepted outside any section. Absent keys take the reference defaults.

use std::collections::BTreeMap;
use std::path::PathBuf;

use fbcool_core::dynamics::{FeedbackKind, FeedbackLaw, Scheme};
use fbcool_core::gaussian::{nbar_from_kelvin, SystemParams};
use fbcool_core::trajectory::SimConfig;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { key: String, line: usize },
    #[error("missing key `{key}` ({reason})")]
    MissingKey { key: &'static str, reason: &'static str },
    #[error("`{key}` out of range: {reason}")]
    RangeError { key: String, reason: String },
    #[error("`{first}` conflicts with `{second}`: give either gamma_over_omega + nbar or nbar_gamma_over_omega + T_kelvin + omega_hz")]
    Conflict { first: String, second: String },
    #[error("line {line}: expected `key = value`, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("line {line}: duplicate key `{key}`")]
    Duplicate { key: String, line: usize },
    #[error("`{key}`: cannot parse `{value}`: {reason}")]
    BadValue { key: String, value: String, reason: String },
}

const DIRECT_BATH: [&str; 2] = ["params.gamma_over_omega", "params.nbar"];
const THERMAL_BATH: [&str; 3] = ["params.nbar_gamma_over_omega", "params.T_kelvin", "params.omega_hz"];

const KNOWN_KEYS: &[&str] = &[
    "params.k_over_omega",
    "params.eta",
    "params.gamma_over_omega",
    "params.nbar",
    "params.nbar_gamma_over_omega",
    "params.T_kelvin",
    "params.omega_hz",
    "scheme.kind",
    "feedback.law",
    "feedback.g",
    "feedback.a_x",
    "feedback.a_p",
    "feedback.b_x",
    "feedback.b_p",
    "sweep.param",
    "sweep.min",
    "sweep.max",
    "sweep.points",
    "sweep.log",
    "sim.dt",
    "sim.n_steps",
    "sim.n_traj",
    "sim.burn_in",
    "sim.seed",
    "sim.workers",
    "sim.dump_dir",
    "sim.dump_trajectories",
    "sim.dump_stride",
    "output.path",
    "output.format",
];

pub const DEFAULT_K_OVER_OMEGA: f64 = 0.18;
pub const DEFAULT_ETA: f64 = 0.34;
pub const DEFAULT_NBAR_GAMMA_OVER_OMEGA: f64 = 0.0058;
pub const DEFAULT_T_KELVIN: f64 = 292.0;
pub const DEFAULT_OMEGA_HZ: f64 = 1e5;

/// How the thermal bath is specified.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Bath {
    Rates { gamma_over_omega: f64, nbar: f64 },
    Thermal { nbar_gamma_over_omega: f64, t_kelvin: f64, omega_hz: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamSpec {
    pub k_over_omega: f64,
    pub eta: f64,
    pub bath: Bath,
}

impl ParamSpec {
    /// Natural-unit parameters (`ω = 1`).
    pub fn system_params(&self) -> fbcool_core::Result<SystemParams> {
        match self.bath {
            Bath::Rates { gamma_over_omega, nbar } => {
                SystemParams::new(1.0, gamma_over_omega, nbar, self.k_over_omega, self.eta)
            }
            Bath::Thermal { nbar_gamma_over_omega, t_kelvin, omega_hz } => SystemParams::from_nbar_gamma(
                1.0,
                nbar_gamma_over_omega,
                nbar_from_kelvin(t_kelvin, omega_hz),
                self.k_over_omega,
                self.eta,
            ),
        }
    }
}

/// Scalar a sweep can vary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    G,
    KOverOmega,
    Eta,
    GammaOverOmega,
    Nbar,
    NbarGammaOverOmega,
}

impl SweepParam {
    pub fn name(&self) -> &'static str {
        match self {
            SweepParam::G => "g",
            SweepParam::KOverOmega => "k_over_omega",
            SweepParam::Eta => "eta",
            SweepParam::GammaOverOmega => "gamma_over_omega",
            SweepParam::Nbar => "nbar",
            SweepParam::NbarGammaOverOmega => "nbar_gamma_over_omega",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "g" => SweepParam::G,
            "k_over_omega" => SweepParam::KOverOmega,
            "eta" => SweepParam::Eta,
            "gamma_over_omega" => SweepParam::GammaOverOmega,
            "nbar" => SweepParam::Nbar,
            "nbar_gamma_over_omega" => SweepParam::NbarGammaOverOmega,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepSpec {
    pub param: SweepParam,
    pub min: f64,
    pub max: f64,
    pub points: usize,
    pub log: bool,
}

impl SweepSpec {
    /// Sweep abscissae; endpoints are exact.
    pub fn values(&self) -> Vec<f64> {
        let n = self.points;
        if n == 1 {
            return vec![self.min];
        }
        (0..n)
            .map(|i| {
                if i == 0 {
                    return self.min;
                }
                if i == n - 1 {
                    return self.max;
                }
                let f = i as f64 / (n - 1) as f64;
                if self.log {
                    (self.min.ln() + (self.max.ln() - self.min.ln()) * f).exp()
                } else {
                    self.min + (self.max - self.min) * f
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GainOverrides {
    pub a_x: Option<f64>,
    pub a_p: Option<f64>,
    pub b_x: Option<f64>,
    pub b_p: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeedbackSpec {
    pub kind: FeedbackKind,
    pub g: f64,
    pub overrides: GainOverrides,
}

impl FeedbackSpec {
    /// The law's single-gain convention at `g`, then explicit overrides.
    pub fn law(&self, g: f64) -> FeedbackLaw {
        let mut law = FeedbackLaw::from_gain(self.kind, g);
        let o = &self.overrides;
        let gains = &mut law.gains;
        gains.a_x = o.a_x.unwrap_or(gains.a_x);
        gains.a_p = o.a_p.unwrap_or(gains.a_p);
        gains.b_x = o.b_x.unwrap_or(gains.b_x);
        gains.b_p = o.b_p.unwrap_or(gains.b_p);
        law
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimSpec {
    pub config: SimConfig,
    pub dump_dir: Option<PathBuf>,
    /// How many trajectories (from index 0) to dump.
    pub dump_trajectories: usize,
    /// Write every `dump_stride`-th step.
    pub dump_stride: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputFormat {
    Csv,
    Text,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputSpec {
    /// `None` writes to standard output.
    pub path: Option<PathBuf>,
    pub format: OutputFormat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub params: ParamSpec,
    /// First entry drives single-scheme commands; `compare` uses all.
    pub schemes: Vec<Scheme>,
    pub feedback: FeedbackSpec,
    pub sweep: SweepSpec,
    pub sim: SimSpec,
    pub output: OutputSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        parse_config("").expect("defaults are valid")
    }
}

impl RunConfig {
    pub fn scheme(&self) -> Scheme {
        self.schemes[0]
    }

    pub fn system_params(&self) -> fbcool_core::Result<SystemParams> {
        self.params.system_params()
    }

    /// Copy with the sweep parameter set to `x`; returns the gain to use.
    pub fn at_sweep_value(&self, x: f64) -> (RunConfig, f64) {
        let mut c = self.clone();
        let mut g = self.feedback.g;
        match self.sweep.param {
            SweepParam::G => g = x,
            SweepParam::KOverOmega => c.params.k_over_omega = x,
            SweepParam::Eta => c.params.eta = x,
            SweepParam::GammaOverOmega => {
                if let Bath::Rates { nbar, .. } = c.params.bath {
                    c.params.bath = Bath::Rates { gamma_over_omega: x, nbar };
                }
            }
            SweepParam::Nbar => {
                if let Bath::Rates { gamma_over_omega, .. } = c.params.bath {
                    c.params.bath = Bath::Rates { gamma_over_omega, nbar: x };
                }
            }
            SweepParam::NbarGammaOverOmega => {
                if let Bath::Thermal { t_kelvin, omega_hz, .. } = c.params.bath {
                    c.params.bath = Bath::Thermal { nbar_gamma_over_omega: x, t_kelvin, omega_hz };
                }
            }
        }
        c.feedback.g = g;
        (c, g)
    }

    /// Checks the sweep against the rest of the configuration.
    pub fn validate_sweep(&self) -> Result<(), ConfigError> {
        let s = &self.sweep;
        let range = |key: &str, reason: String| ConfigError::RangeError { key: key.into(), reason };
        if s.points == 0 {
            return Err(range("sweep.points", "must be at least 1".into()));
        }
        if !(s.min.is_finite() && s.max.is_finite()) {
            return Err(range("sweep.min", "bounds must be finite".into()));
        }
        if s.log && !(s.min > 0.0) {
            return Err(range("sweep.min", format!("log sweeps need positive bounds, got {}", s.min)));
        }
        if s.log && !(s.max > 0.0) {
            return Err(range("sweep.max", format!("log sweeps need positive bounds, got {}", s.max)));
        }
        let bath_mismatch = matches!(
            (s.param, self.params.bath),
            (SweepParam::GammaOverOmega | SweepParam::Nbar, Bath::Thermal { .. })
                | (SweepParam::NbarGammaOverOmega, Bath::Rates { .. })
        );
        if bath_mismatch {
            return Err(range("sweep.param", format!("`{}` is not part of the configured bath parameterization", s.param.name())));
        }
        Ok(())
    }
}

fn parse_f64(key: &str, value: &str) -> Result<f64, ConfigError> {
    value.parse::<f64>().map_err(|e| ConfigError::BadValue { key: key.into(), value: value.into(), reason: e.to_string() })
}

fn parse_usize(key: &str, value: &str) -> Result<usize, ConfigError> {
    // integer counts may be written in float notation, e.g. 1e4
    if let Ok(n) = value.parse::<usize>() {
        return Ok(n);
    }
    let f = parse_f64(key, value)?;
    if f >= 0.0 && f.fract() == 0.0 && f < 2f64.powi(53) {
        Ok(f as usize)
    } else {
        Err(ConfigError::BadValue { key: key.into(), value: value.into(), reason: "expected a non-negative integer".into() })
    }
}

fn parse_bool(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(ConfigError::BadValue { key: key.into(), value: value.into(), reason: "expected true or false".into() }),
    }
}

fn unquote(v: &str) -> &str {
    let v = v.trim();
    if v.len() >= 2 && ((v.starts_with('"') && v.ends_with('"')) || (v.starts_with('\'') && v.ends_with('\''))) {
        &v[1..v.len() - 1]
    } else {
        v
    }
}

fn tokenize(text: &str) -> Result<BTreeMap<String, String>, ConfigError> {
    let mut map = BTreeMap::new();
    let mut section = String::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        if line.starts_with('[') && line.ends_with(']') {
            section = line[1..line.len() - 1].trim().to_string();
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(ConfigError::Syntax { line: line_no, text: raw.trim().into() });
        };
        let k = k.trim();
        if k.is_empty() {
            return Err(ConfigError::Syntax { line: line_no, text: raw.trim().into() });
        }
        let key = if !section.is_empty() {
            format!("{section}.{k}")
        } else if !k.contains('.') && KNOWN_KEYS.contains(&format!("params.{k}").as_str()) {
            format!("params.{k}")
        } else {
            k.to_string()
        };
        if !KNOWN_KEYS.contains(&key.as_str()) {
            return Err(ConfigError::UnknownKey { key, line: line_no });
        }
        if map.insert(key.clone(), unquote(v).to_string()).is_some() {
            return Err(ConfigError::Duplicate { key, line: line_no });
        }
    }
    Ok(map)
}

fn range(key: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::RangeError { key: key.into(), reason: reason.into() }
}

/// Parses and validates a configuration, filling defaults.
pub fn parse_config(text: &str) -> Result<RunConfig, ConfigError> {
    let map = tokenize(text)?;
    let f = |key: &str| -> Result<Option<f64>, ConfigError> { map.get(key).map(|v| parse_f64(key, v)).transpose() };
    let u = |key: &str| -> Result<Option<usize>, ConfigError> { map.get(key).map(|v| parse_usize(key, v)).transpose() };

    let k_over_omega = f("params.k_over_omega")?.unwrap_or(DEFAULT_K_OVER_OMEGA);
    if !(k_over_omega >= 0.0 && k_over_omega.is_finite()) {
        return Err(range("params.k_over_omega", format!("must be finite and >= 0, got {k_over_omega}")));
    }
    let eta = f("params.eta")?.unwrap_or(DEFAULT_ETA);
    if !(0.0..=1.0).contains(&eta) {
        return Err(range("params.eta", format!("must lie in [0, 1], got {eta}")));
    }

    let direct: Vec<&str> = DIRECT_BATH.iter().copied().filter(|k| map.contains_key(*k)).collect();
    let thermal: Vec<&str> = THERMAL_BATH.iter().copied().filter(|k| map.contains_key(*k)).collect();
    let bath = match (direct.first(), thermal.first()) {
        (Some(a), Some(b)) => return Err(ConfigError::Conflict { first: (*a).into(), second: (*b).into() }),
        (Some(_), None) => {
            let gamma = f("params.gamma_over_omega")?.ok_or(ConfigError::MissingKey {
                key: "params.gamma_over_omega",
                reason: "required together with params.nbar",
            })?;
            let nbar = f("params.nbar")?.ok_or(ConfigError::MissingKey {
                key: "params.nbar",
                reason: "required together with params.gamma_over_omega",
            })?;
            if !(gamma >= 0.0 && gamma.is_finite()) {
                return Err(range("params.gamma_over_omega", format!("must be finite and >= 0, got {gamma}")));
            }
            if !(nbar >= 0.0 && nbar.is_finite()) {
                return Err(range("params.nbar", format!("must be finite and >= 0, got {nbar}")));
            }
            Bath::Rates { gamma_over_omega: gamma, nbar }
        }
        _ => {
            let ng = f("params.nbar_gamma_over_omega")?.unwrap_or(DEFAULT_NBAR_GAMMA_OVER_OMEGA);
            let t = f("params.T_kelvin")?.unwrap_or(DEFAULT_T_KELVIN);
            let hz = f("params.omega_hz")?.unwrap_or(DEFAULT_OMEGA_HZ);
            if !(ng >= 0.0 && ng.is_finite()) {
                return Err(range("params.nbar_gamma_over_omega", format!("must be finite and >= 0, got {ng}")));
            }
            if !(t > 0.0 && t.is_finite()) {
                return Err(range("params.T_kelvin", format!("must be positive, got {t}")));
            }
            if !(hz > 0.0 && hz.is_finite()) {
                return Err(range("params.omega_hz", format!("must be positive, got {hz}")));
            }
            Bath::Thermal { nbar_gamma_over_omega: ng, t_kelvin: t, omega_hz: hz }
        }
    };
    let params = ParamSpec { k_over_omega, eta, bath };

    let schemes = match map.get("scheme.kind") {
        None => vec![Scheme::QndPosition],
        Some(v) => parse_scheme_list(v).map_err(|reason| range("scheme.kind", reason))?,
    };

    let kind = match map.get("feedback.law") {
        None => FeedbackKind::KalmanXP,
        Some(v) => v.parse().map_err(|reason: String| range("feedback.law", reason))?,
    };
    let g = f("feedback.g")?.unwrap_or(1e4);
    if !g.is_finite() {
        return Err(range("feedback.g", "must be finite"));
    }
    let overrides = GainOverrides { a_x: f("feedback.a_x")?, a_p: f("feedback.a_p")?, b_x: f("feedback.b_x")?, b_p: f("feedback.b_p")? };
    if kind == FeedbackKind::Direct && (overrides.a_p.is_some() || overrides.b_p.is_some()) {
        let key = if overrides.a_p.is_some() { "feedback.a_p" } else { "feedback.b_p" };
        return Err(range(key, "direct feedback uses a_x and b_x only"));
    }
    let feedback = FeedbackSpec { kind, g, overrides };

    let param = match map.get("sweep.param") {
        None => SweepParam::G,
        Some(v) => SweepParam::parse(v).ok_or_else(|| range("sweep.param", format!("unknown sweep parameter `{v}`")))?,
    };
    let sweep = SweepSpec {
        param,
        min: f("sweep.min")?.unwrap_or(1e-2),
        max: f("sweep.max")?.unwrap_or(1e4),
        points: u("sweep.points")?.unwrap_or(60),
        log: map.get("sweep.log").map(|v| parse_bool("sweep.log", v)).transpose()?.unwrap_or(true),
    };

    let dt = f("sim.dt")?.unwrap_or(5e-4);
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(range("sim.dt", format!("must be positive, got {dt}")));
    }
    let n_traj = u("sim.n_traj")?.unwrap_or(10_000);
    if n_traj == 0 {
        return Err(range("sim.n_traj", "must be at least 1"));
    }
    let seed = match map.get("sim.seed") {
        None => 0,
        Some(v) => v.parse::<u64>().map_err(|e| ConfigError::BadValue { key: "sim.seed".into(), value: v.clone(), reason: e.to_string() })?,
    };
    let sim = SimSpec {
        config: SimConfig {
            dt,
            n_steps: u("sim.n_steps")?.unwrap_or(8_000),
            n_traj,
            burn_in: u("sim.burn_in")?,
            seed,
            workers: u("sim.workers")?.unwrap_or(0),
        },
        dump_dir: map.get("sim.dump_dir").map(PathBuf::from),
        dump_trajectories: u("sim.dump_trajectories")?.unwrap_or(0),
        dump_stride: u("sim.dump_stride")?.unwrap_or(1).max(1),
    };
    if sim.dump_trajectories > 0 && sim.dump_dir.is_none() {
        return Err(ConfigError::MissingKey { key: "sim.dump_dir", reason: "required when sim.dump_trajectories > 0" });
    }

    let format = match map.get("output.format").map(|s| s.to_ascii_lowercase()) {
        None => OutputFormat::Csv,
        Some(s) if s == "csv" => OutputFormat::Csv,
        Some(s) if s == "text" => OutputFormat::Text,
        Some(s) => return Err(range("output.format", format!("expected csv or text, got `{s}`"))),
    };
    let output = OutputSpec { path: map.get("output.path").map(PathBuf::from), format };

    let cfg = RunConfig { params, schemes, feedback, sweep, sim, output };
    cfg.validate_sweep()?;
    Ok(cfg)
}

/// Parses a comma-separated scheme list.
pub fn parse_scheme_list(s: &str) -> Result<Vec<Scheme>, String> {
    let list = s.split(',').map(str::trim).filter(|t| !t.is_empty()).map(str::parse).collect::<Result<Vec<Scheme>, _>>()?;
    if list.is_empty() {
        return Err("empty scheme list".into());
    }
    Ok(list)
}
