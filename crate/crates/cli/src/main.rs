//! `qec-sim`: run closed-loop bit-flip code experiments from JSON configs.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use bitflip_qec::config::{parse_config_with_overrides, ExperimentConfig, ParsedConfig};
use bitflip_qec::experiments::{self, Simulator};
use bitflip_qec::lyapunov::rate_estimate;
use bitflip_qec::verify::{self, SuiteSize};
use bitflip_qec::SimError;

#[derive(Parser, Debug)]
#[command(name = "qec-sim", version = experiments::version(), about)]
/// Monte Carlo simulator for the continuously measured three-qubit bit-flip code
/// with noise-assisted hysteresis feedback.
///
/// Config files are JSON. Required keys: plant, controller, horizon, seed.
/// Defaults: filter = plant, estimator = "reduced-filter", feedback = true,
/// dt = 1e-3 / max(measurement_strength), n_traj = 1000, latency = 0,
/// bias = [0, 0, 0], record_stride = 100, initial_state = {"basis": "000"},
/// filter_initial_state = {"basis": "000"}. Per-channel values may be a
/// number or an array of three numbers.
struct Cli {
    /// Worker threads for ensembles [default: all cores]
    #[arg(long, global = true, env = "QEC_SIM_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// Experiment config (JSON)
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Override a config key before validation, e.g. `--set plant.flip_rate=0.02`
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one trajectory and write its metrics as CSV
    Simulate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Trajectory index, selecting the random stream
        #[arg(long, default_value_t = 0)]
        trajectory: u64,
        /// Output CSV [default: stdout]
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },
    /// Run the ensemble and write mean metrics as CSV plus a JSON sidecar
    Ensemble {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output CSV; the sidecar goes next to it with a `.json` extension [default: stdout, no sidecar]
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },
    /// Print the decay-rate estimate for the configured controller
    RateEstimate {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Run the invariant and generator checks and print a pass/fail table
    Verify {
        /// Desk-scale sizes, a few minutes at most
        #[arg(long)]
        quick: bool,
        #[arg(long, default_value_t = 2019)]
        seed: u64,
    },
    /// Write the single-qubit fidelity curve (1 + exp(-2 gamma t)) / 2 as CSV
    Baseline {
        #[arg(long)]
        gamma: f64,
        #[arg(long)]
        horizon: f64,
        /// Number of intervals between 0 and the horizon
        #[arg(long, default_value_t = 640)]
        points: usize,
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },
}

fn load(args: &ConfigArgs) -> Result<ParsedConfig> {
    let text = std::fs::read_to_string(&args.config).with_context(|| format!("reading {}", args.config.display()))?;
    let parsed = parse_config_with_overrides(&text, &args.overrides).with_context(|| format!("in {}", args.config.display()))?;
    for w in &parsed.warnings {
        eprintln!("warning: {w}");
    }
    Ok(parsed)
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn simulate(config: &ExperimentConfig, trajectory: u64, out: Option<&Path>) -> Result<()> {
    let traj = Simulator::new(config)?.run(trajectory)?;
    experiments::write_trajectory_csv(&traj, output(out)?)?;
    Ok(())
}

fn ensemble(parsed: &ParsedConfig, out: Option<&Path>) -> Result<()> {
    let result = match experiments::run_ensemble(&parsed.config) {
        Err(e @ SimError::TooManyAborts { .. }) => bail!("ensemble aborted: {e}"),
        r => r?,
    };
    experiments::write_ensemble_csv(&result, output(out)?)?;
    if let Some(path) = out {
        let side = experiments::sidecar(&parsed.config, &result.diagnostics, &parsed.warnings);
        let side_path = path.with_extension("json");
        std::fs::write(&side_path, serde_json::to_string_pretty(&side)? + "\n")
            .with_context(|| format!("writing {}", side_path.display()))?;
    }
    eprintln!(
        "{} trajectories, {} excluded after blow-up",
        result.diagnostics.completed, result.diagnostics.blowup_count
    );
    Ok(())
}

fn rate(config: &ExperimentConfig) {
    let est = rate_estimate(&config.controller_params(), &config.plant);
    println!("r = {}", est.r);
    println!("c_branch = {}", est.c_branch);
    println!("g_branch = {}", est.g_branch);
    println!("g_min = {}", est.g_min);
    println!("g_argmin = {:?}", est.g_argmin);
    println!("heuristic_r = {}", est.heuristic_r);
    println!("grid_resolution = {}", est.grid_resolution);
}

fn run(cli: Cli) -> Result<bool> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!("--threads must be at least 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring the thread pool")?;
    }
    match cli.command {
        Command::Simulate { config, trajectory, out } => simulate(&load(&config)?.config, trajectory, out.as_deref())?,
        Command::Ensemble { config, out } => ensemble(&load(&config)?, out.as_deref())?,
        Command::RateEstimate { config } => rate(&load(&config)?.config),
        Command::Verify { quick, seed } => {
            let size = if quick { SuiteSize::quick() } else { SuiteSize::full() };
            let results = verify::run_suite(size, seed);
            print!("{}", verify::format_table(&results));
            return Ok(verify::all_passed(&results));
        }
        Command::Baseline { gamma, horizon, points, out } => {
            if !(gamma >= 0.0 && gamma.is_finite()) {
                bail!("--gamma must be >= 0, got {gamma}");
            }
            if !(horizon > 0.0 && horizon.is_finite()) || points == 0 {
                bail!("--horizon must be > 0 and --points >= 1");
            }
            let times: Vec<f64> = (0..=points).map(|i| horizon * i as f64 / points as f64).collect();
            experiments::write_baseline_csv(gamma, &times, output(out.as_deref())?)?;
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
