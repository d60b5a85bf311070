use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use cencov::io::{load_scenario, non_convergence_report, render_report, run_fit, summary_csv, write_json, FitConfig};
use cencov::simulation::{render_table, run_replications};
use cencov::CencovError;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "cencov", about = "Regression with a right-censored or missing covariate")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit one estimator to a CSV dataset described by a JSON config.
    Fit {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the output path named in the config.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Run a simulation scenario and write its summary table.
    Simulate {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, env = "CENCOV_THREADS")]
        threads: Option<usize>,
        /// Directory for the summary CSV and JSON files.
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
        /// Overrides the scenario replication count.
        #[arg(long)]
        replications: Option<usize>,
    },
    /// Print the version.
    Version,
}

const EXIT_INVALID: u8 = 2;
const EXIT_NONCONVERGED: u8 = 3;
const EXIT_FAILURE_CAP: u8 = 4;

fn classify(err: &CencovError) -> u8 {
    match err.root() {
        CencovError::NonConvergence { .. } => EXIT_NONCONVERGED,
        CencovError::Config(_)
        | CencovError::DimensionMismatch { .. }
        | CencovError::InvalidParameter(_)
        | CencovError::InvalidObservation { .. }
        | CencovError::InvalidCovariance(_)
        | CencovError::MissingNuisance(_) => EXIT_INVALID,
        _ => 1,
    }
}

fn fit(config: PathBuf, output: Option<PathBuf>) -> anyhow::Result<u8> {
    let cfg = match FitConfig::from_json_file(&config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return Ok(EXIT_INVALID);
        }
    };
    let output = output.or_else(|| cfg.output.clone());
    let report = match run_fit(&cfg) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            if let Some(diag) = non_convergence_report(&cfg, &e) {
                match &output {
                    Some(path) => write_json(path, &diag).with_context(|| format!("writing {}", path.display()))?,
                    None => println!("{}", serde_json::to_string_pretty(&diag)?),
                }
            }
            return Ok(classify(&e));
        }
    };
    print!("{}", render_report(&report));
    if let Some(path) = output {
        write_json(&path, &report).with_context(|| format!("writing {}", path.display()))?;
    } else {
        println!("{}", serde_json::to_string_pretty(&report)?);
    }
    Ok(if report.result.converged { 0 } else { EXIT_NONCONVERGED })
}

fn simulate(path: PathBuf, threads: Option<usize>, out_dir: PathBuf, reps: Option<usize>) -> anyhow::Result<u8> {
    let mut scenario = match load_scenario(&path) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return Ok(EXIT_INVALID);
        }
    };
    if let Some(r) = reps {
        scenario.replications = r;
    }
    let summary = match run_replications(&scenario, threads) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return Ok(classify(&e));
        }
    };
    std::fs::create_dir_all(&out_dir)?;
    let stem = out_dir.join(format!("{}_summary", scenario.name));
    std::fs::write(stem.with_extension("csv"), summary_csv(&summary)?)?;
    write_json(&stem.with_extension("json"), &summary)?;
    println!("scenario {} (n = {}, N = {}, seed = {})", summary.scenario, summary.n, summary.replications, summary.master_seed);
    print!("{}", render_table(&summary));
    for c in summary.counters.iter().filter(|c| c.failures > 0 || c.clamp_events > 0) {
        println!("{}: {} failed fits, {} clamped probabilities", c.label, c.failures, c.clamp_events);
    }
    if summary.failure_cap_exceeded {
        eprintln!(
            "error: {} of {} fits failed, above the {:.1}% cap",
            summary.failed_fits,
            summary.total_fits,
            100.0 * scenario.failure_cap
        );
        return Ok(EXIT_FAILURE_CAP);
    }
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INVALID } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Fit { config, output } => fit(config, output),
        Command::Simulate { scenario, threads, out_dir, replications } => simulate(scenario, threads, out_dir, replications),
        Command::Version => {
            println!("cencov {}", cencov::VERSION);
            Ok(0)
        }
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
