use std::fs;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use fbcool::commands;
use fbcool::config::{parse_config, parse_scheme_list, OutputFormat, RunConfig};

#[derive(Parser)]
#[command(name = "fbcool", version, about = "Feedback cooling of a continuously measured oscillator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Run configuration (flat `key = value` file); defaults apply when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output file; standard output when absent.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Measurement scheme(s): qnd, homodyne, dual, pure (comma separated).
    #[arg(long, global = true)]
    scheme: Option<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for trajectory ensembles (0 = all CPUs).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[arg(long, global = true)]
    points: Option<usize>,
    #[arg(long, global = true)]
    from: Option<f64>,
    #[arg(long, global = true)]
    to: Option<f64>,
    /// Log-spaced sweep (`--log=false` for linear spacing).
    #[arg(long, global = true, num_args = 0..=1, default_missing_value = "true")]
    log: Option<bool>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Solve one steady operating point and print every rate and margin.
    Steady,
    /// Sweep one scalar (the feedback gain by default) and write CSV.
    Sweep,
    /// Run the sweep for each scheme given by --scheme or scheme.kind.
    Compare,
    /// Monte-Carlo ensemble of conditional trajectories.
    Trajectories,
    /// Plain-text summary.
    Report,
}

fn load(cli: &Cli) -> anyhow::Result<RunConfig> {
    let text = match &cli.config {
        Some(p) => fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        None => String::new(),
    };
    let mut cfg = parse_config(&text)?;
    if let Some(out) = &cli.out {
        cfg.output.path = Some(out.clone());
    }
    if let Some(s) = &cli.scheme {
        cfg.schemes = parse_scheme_list(s).map_err(|e| anyhow::anyhow!("--scheme: {e}"))?;
    }
    if let Some(seed) = cli.seed {
        cfg.sim.config.seed = seed;
    }
    if let Some(w) = cli.workers {
        cfg.sim.config.workers = w;
    }
    if let Some(n) = cli.points {
        cfg.sweep.points = n;
    }
    if let Some(x) = cli.from {
        cfg.sweep.min = x;
    }
    if let Some(x) = cli.to {
        cfg.sweep.max = x;
    }
    if let Some(l) = cli.log {
        cfg.sweep.log = l;
    }
    cfg.validate_sweep()?;
    Ok(cfg)
}

fn emit(cfg: &RunConfig, write: impl FnOnce(&mut dyn Write) -> io::Result<()>) -> anyhow::Result<()> {
    match &cfg.output.path {
        Some(path) => {
            let mut f = io::BufWriter::new(fs::File::create(path).with_context(|| format!("creating {}", path.display()))?);
            write(&mut f)?;
            f.flush()?;
        }
        None => {
            let stdout = io::stdout();
            let mut lock = stdout.lock();
            write(&mut lock)?;
            lock.flush()?;
        }
    }
    Ok(())
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    let cfg = load(cli)?;
    match cli.command {
        Command::Steady => {
            let op = commands::steady(&cfg)?;
            let text = commands::steady_text(&cfg, &op);
            match (&cfg.output.path, cfg.output.format) {
                (None, _) => print!("{text}"),
                (Some(_), OutputFormat::Text) => emit(&cfg, |w| w.write_all(text.as_bytes()))?,
                (Some(_), OutputFormat::Csv) => {
                    print!("{text}");
                    emit(&cfg, |mut w| commands::write_steady_csv(&mut w, &cfg, &op))?;
                }
            }
        }
        Command::Sweep => {
            let scheme = cfg.scheme();
            let rows = commands::sweep(&cfg, scheme);
            emit(&cfg, |mut w| commands::write_sweep_csv(&mut w, cfg.sweep.param, &rows))?;
            commands::check_rows(&mut io::stderr(), [(scheme, rows.as_slice())])?;
        }
        Command::Compare => {
            let runs: Vec<_> = cfg.schemes.iter().map(|&s| (s, commands::sweep(&cfg, s))).collect();
            emit(&cfg, |mut w| commands::write_compare_csv(&mut w, cfg.sweep.param, &runs))?;
            commands::check_rows(&mut io::stderr(), runs.iter().map(|(s, r)| (*s, r.as_slice())))?;
        }
        Command::Trajectories => {
            let summary = commands::trajectories(&cfg)?;
            emit(&cfg, |mut w| commands::write_trajectory_csv(&mut w, &summary))?;
        }
        Command::Report => {
            let text = commands::report_text(&cfg)?;
            emit(&cfg, |w| w.write_all(text.as_bytes()))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
