use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cdm_cli::compare::DEFAULT_DENSITY_TOLERANCE;
use cdm_cli::config::output_dir;
use cdm_cli::ingest::ingest_market;
use cdm_cli::{compare_runs, load_config, run_scenario, selftest, CliError, Result};
use clap::{Parser, Subcommand};

/// Conditional density model experiments.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario config; writes artifacts and manifest.json.
    Run {
        config: PathBuf,
        /// Override a config field, e.g. `--set seeds.paths=100`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Output directory (takes precedence over CDM_OUTPUT_DIR and output.dir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Validate a `strike,price` CSV and recover its density.
    Ingest {
        csv: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        maturity: f64,
    },
    /// Diff two run manifests (files or run directories).
    Compare {
        a: PathBuf,
        b: PathBuf,
        /// Sup-norm tolerance for density snapshots.
        #[arg(long, default_value_t = DEFAULT_DENSITY_TOLERANCE)]
        density_tol: f64,
    },
    /// Run the built-in invariant suite.
    Selftest,
}

fn run(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::Run { config, overrides, out } => {
            let cfg = load_config(&config, &overrides)?;
            let base = config.parent().unwrap_or(Path::new("."));
            let dir = out.unwrap_or_else(|| output_dir(&cfg, base));
            let m = run_scenario(&cfg, base, &dir)?;
            println!(
                "{} ({} artifacts, config {})",
                dir.join("manifest.json").display(),
                m.artifacts.len(),
                &m.config_hash[..12]
            );
            for r in &m.invariants {
                println!("  {:<12} {:?}: {}", r.name, r.status, r.detail);
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Ingest { csv, maturity } => {
            let ing = ingest_market(&csv, maturity)?;
            println!("{}", serde_json::to_string_pretty(&ing.report())?);
            Ok(ExitCode::SUCCESS)
        }
        Command::Compare { a, b, density_tol } => {
            let report = compare_runs(&a, &b, density_tol)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(if report.deterministic_mismatch {
                ExitCode::from(4)
            } else {
                ExitCode::SUCCESS
            })
        }
        Command::Selftest => {
            let checks = selftest::run_all();
            for c in &checks {
                println!("{} {:<28} {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            Ok(if checks.iter().all(|c| c.passed) {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(4)
            })
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(&e as &CliError)
        }
    }
}
