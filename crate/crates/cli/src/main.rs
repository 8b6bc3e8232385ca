//! `stagewise`: run, compare, and plot serial / layer-parallel training
//! experiments.
//!
//! Exit codes: 0 success, 1 usage or config error, 2 numeric failure during
//! training, 3 gradient-check suite failure.

use clap::{Parser, Subcommand};
use stagewise_core::error::Error;
use stagewise_core::experiment::{compare_runs, render_curves, run_experiment, RunConfig};
use stagewise_core::gradcheck::run_gradient_suite;
use stagewise_core::parallel::ExecMode;
use std::path::PathBuf;
use std::process::ExitCode;

/// Output-directory override; takes precedence over the config file.
const ENV_OUT_DIR: &str = "STAGEWISE_OUT_DIR";
/// Worker execution override: "threads" or "inline".
const ENV_WORKERS: &str = "STAGEWISE_WORKERS";

#[derive(Parser)]
#[command(
    name = "stagewise",
    about = "Layer-parallel residual network training experiments",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute the run described by a config file.
    Run {
        /// Path to a TOML run config.
        config: PathBuf,
    },
    /// Tabulate completed runs against the first as baseline.
    Compare {
        /// Two or more run directories.
        dirs: Vec<PathBuf>,
    },
    /// Render SVG learning curves from a metrics file.
    Plot {
        /// Path to a metrics.csv produced by `run`.
        metrics: PathBuf,
        /// Comma-separated metric field names.
        #[arg(long, value_delimiter = ',')]
        fields: Vec<String>,
        /// Where to write the charts (defaults to the metrics file's directory).
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Run the finite-difference gradient suite and exit nonzero on failure.
    GradCheck {
        /// Config file supplying the seed (dimensions come from the suite grid).
        config: PathBuf,
    },
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Numeric { .. } => 2,
        _ => 1,
    }
}

fn apply_env_overrides(cfg: &mut RunConfig) -> Result<(), Error> {
    if let Ok(dir) = std::env::var(ENV_OUT_DIR) {
        cfg.out_dir = dir;
    }
    match std::env::var(ENV_WORKERS) {
        Ok(v) if v == "threads" => cfg.workers = ExecMode::Threads,
        Ok(v) if v == "inline" => cfg.workers = ExecMode::Inline,
        Ok(v) => {
            return Err(Error::usage(format!(
                "{ENV_WORKERS} must be \"threads\" or \"inline\", got {v:?}"
            )))
        }
        Err(_) => {}
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Run { config } => {
            let mut cfg = RunConfig::load(&config)?;
            apply_env_overrides(&mut cfg)?;
            let summary = run_experiment(&cfg)?;
            println!(
                "run complete: mode={} stages={} epochs={}",
                summary.mode, summary.stages, summary.epochs
            );
            println!(
                "  final: loss={:.6} accuracy={:.4} violation={:.3e}",
                summary.final_train_loss, summary.final_test_accuracy, summary.final_violation_mean
            );
            if let Some(rho) = summary.predicted_speedup {
                println!(
                    "  predicted speedup {:.3} (upper bound {:.3})",
                    rho,
                    summary.speedup_upper_bound.unwrap_or(f64::INFINITY)
                );
            }
            println!("  outputs in {}", cfg.out_dir);
            Ok(())
        }
        Command::Compare { dirs } => {
            let report = compare_runs(&dirs)?;
            print!("{report}");
            Ok(())
        }
        Command::Plot {
            metrics,
            fields,
            out_dir,
        } => {
            let out = out_dir.unwrap_or_else(|| {
                metrics
                    .parent()
                    .map(PathBuf::from)
                    .unwrap_or_else(|| PathBuf::from("."))
            });
            let written = render_curves(&metrics, &fields, &out)?;
            for path in written {
                println!("wrote {}", path.display());
            }
            Ok(())
        }
        Command::GradCheck { config } => {
            let cfg = RunConfig::load(&config)?;
            let report = run_gradient_suite(cfg.seed, false)?;
            let mut failed = 0usize;
            for check in &report.checks {
                println!(
                    "{} {:<40} worst rel err {:.3e} (tol {:.0e})",
                    if check.passed() { "PASS" } else { "FAIL" },
                    check.name,
                    check.worst_rel_err,
                    check.tolerance
                );
                failed += usize::from(!check.passed());
            }
            if failed > 0 {
                // Exit 3 per the harness contract; not a config problem.
                eprintln!("{failed} gradient checks failed");
                std::process::exit(3);
            }
            println!("all {} gradient checks passed", report.checks.len());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
