use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use cviro::eval::{evaluate_run, monte_carlo};
use cviro::io::{self, Mode, RunConfig};
use cviro::observability::audit;
use cviro::pipeline::{initial_from_truth, run_estimator, EstimatorKind};
use cviro::sim::simulate;

#[derive(Parser)]
#[command(
    name = "cviro",
    version,
    about = "Visual-inertial-range odometry with UWB anchor calibration"
)]
struct Cli {
    /// Log verbosity (-v info, -vv debug, -vvv trace).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with ground truth.
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Replay a dataset through one estimator.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// cviro or vio-baseline; defaults to the config value.
        #[arg(long)]
        estimator: Option<EstimatorKind>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Monte Carlo comparison of both estimators.
    Mc {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Defaults to the config value.
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Observability nullspace audit of both error parameterizations.
    ObsAudit {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load(path: Option<&Path>, mode: Mode, patch: impl FnOnce(&mut RunConfig)) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => io::parse_config(p)?,
        None => RunConfig::default(),
    };
    cfg.mode = Some(mode);
    patch(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_simulate(config: Option<&Path>, out: &Path) -> Result<()> {
    let cfg = load(config, Mode::Simulate, |c| c.out = Some(out.into()))?;
    let data = simulate(&cfg.sim)?;
    io::write_dataset(&data, out)?;
    // Paths are left out so the dataset does not depend on where it lives.
    let saved = RunConfig {
        out: None,
        data: None,
        ..cfg.clone()
    };
    io::write_text_file(&saved.to_toml()?, &out.join("config.toml"))?;
    println!(
        "wrote {} imu, {} feature, {} range samples to {}",
        data.imu.len(),
        data.features.len(),
        data.ranges.len(),
        out.display()
    );
    Ok(())
}

fn cmd_run(
    config: Option<&Path>,
    data_dir: &Path,
    estimator: Option<EstimatorKind>,
    out: &Path,
) -> Result<()> {
    let cfg = load(config, Mode::Run, |c| {
        c.data = Some(data_dir.into());
        c.out = Some(out.into());
        if let Some(e) = estimator {
            c.estimator = e;
        }
    })?;
    let data =
        io::read_dataset(data_dir).with_context(|| format!("reading dataset {}", data_dir.display()))?;
    let init = initial_from_truth(&data)?;
    let kind = cfg.estimator;
    let r = run_estimator(
        kind,
        &data,
        &init,
        &cfg.filter,
        &cfg.sim.camera,
        &cfg.sim.uwb,
        cfg.sim.seed,
    )?;

    io::write_tum_tagged(
        r.points.iter().map(|p| (p.timestamp, &p.rotation, &p.position)),
        Some(kind.name()),
        &out.join("trajectory.tum"),
    )?;
    let mut ids: Vec<usize> = data.ranges.iter().map(|m| m.anchor_id).collect();
    ids.sort_unstable();
    ids.dedup();
    io::write_state_csv(&r.points, &ids, &out.join("state.csv"))?;
    io::write_anchor_estimates(&r.anchors, &out.join("anchors_estimate.csv"))?;

    let s = &r.stats;
    let mut kv = format!("estimator = {}\n", kind.name());
    for (k, v) in [
        ("epochs", s.epochs),
        ("tracks_used", s.tracks_used),
        ("tracks_gated", s.tracks_gated),
        ("tracks_rejected", s.tracks_rejected),
        ("ranges_applied", s.ranges_applied),
        ("ranges_gated", s.ranges_gated),
        ("anchors_initialized", s.anchors_initialized),
    ] {
        let _ = writeln!(kv, "{k} = {v}");
    }
    let _ = writeln!(
        kv,
        "max_reprojection_residual = {:.9e}",
        s.max_reprojection_residual
    );
    let m = evaluate_run(&r, &data)?;
    let _ = writeln!(kv, "final_position_error = {:.9e}", m.final_position_error);
    let _ = writeln!(kv, "ate = {:.9e}", m.ate);
    io::write_text_file(&kv, &out.join("run.kv"))?;
    print!("{kv}");
    Ok(())
}

fn cmd_mc(config: Option<&Path>, runs: Option<usize>, out: &Path) -> Result<()> {
    let cfg = load(config, Mode::Mc, |c| {
        c.out = Some(out.into());
        if let Some(n) = runs {
            c.runs = n;
        }
    })?;
    let report = monte_carlo(
        &cfg.sim,
        &cfg.filter,
        cfg.runs,
        &[EstimatorKind::Cviro, EstimatorKind::VioBaseline],
    )?;
    io::write_report(&report, out)?;
    print!("{}", report.to_text());
    Ok(())
}

fn cmd_audit(config: Option<&Path>, out: &Path) -> Result<()> {
    let cfg = load(config, Mode::ObsAudit, |c| c.out = Some(out.into()))?;
    let report = audit(&cfg.audit)?;
    let text = report.to_text();
    io::write_text_file(&text, out)?;
    print!("{text}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        2 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match &cli.command {
        Command::Simulate { config, out } => cmd_simulate(config.as_deref(), out),
        Command::Run {
            config,
            data,
            estimator,
            out,
        } => cmd_run(config.as_deref(), data, *estimator, out),
        Command::Mc { config, runs, out } => cmd_mc(config.as_deref(), *runs, out),
        Command::ObsAudit { config, out } => cmd_audit(config.as_deref(), out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
