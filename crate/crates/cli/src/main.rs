use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use datprl_cli::commands::{self, CliError, CliResult, EXIT_OK, EXIT_USAGE, EXIT_VERIFY};
use datprl_cli::gradcheck::{fault_op, GradcheckOptions};

/// Domain- and task-aware prompt learning for image restoration on a synthetic suite.
#[derive(Parser)]
#[command(name = "datprl", version)]
struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Overrides {
    /// Override a config key, e.g. `--set trainer.steps=500`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write history, checkpoint and metrics to the run directory.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (defaults to $DATPRL_OUTPUT_ROOT/run-<seed>).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from the run directory's checkpoint if present.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint on the seeded eval set.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
        /// Eval-set seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Write prompt-selection, gate and similarity analytics for a checkpoint.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference gradient checks for every loss and forward path.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        seeds: usize,
        /// Corrupt the backward rule of one op; the run must then fail.
        #[arg(long, value_name = "OP")]
        inject_fault: Option<String>,
    },
    /// Print the resolved config with every key documented.
    Config {
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
}

fn with_seed(mut set: Vec<String>, key: &str, seed: Option<u64>) -> Vec<String> {
    if let Some(s) = seed {
        set.push(format!("{key}={s}"));
    }
    set
}

fn run(cli: Cli) -> CliResult<i32> {
    match cli.command {
        Command::Train {
            config,
            overrides,
            seed,
            out,
            resume,
        } => {
            let mut set = with_seed(overrides.set, "trainer.seed", seed);
            if let Some(dir) = out {
                set.push(format!("output.dir={}", dir.display()));
            }
            let cfg = commands::load_config(config.as_deref(), &set)?;
            let outcome = commands::cmd_train(&cfg, resume)?;
            if let Some(last) = outcome.records.last() {
                println!("step {} loss {:.6}", last.step, last.total);
            }
            print!("{}", commands::format_metrics(&outcome.metrics));
            println!("run directory: {}", outcome.run_dir.display());
            let bad = outcome.audit.iter().filter(|a| a.rel_err > commands::AUDIT_TOLERANCE).count();
            if bad > 0 {
                eprintln!("gradient audit: {bad} of {} entries above tolerance", outcome.audit.len());
                return Ok(EXIT_VERIFY);
            }
            Ok(EXIT_OK)
        }
        Command::Eval {
            checkpoint,
            overrides,
            seed,
            csv,
        } => {
            let set = with_seed(overrides.set, "data.eval_seed", seed);
            let cells = commands::cmd_eval(&checkpoint, &set, csv.as_deref())?;
            print!("{}", commands::format_metrics(&cells));
            Ok(EXIT_OK)
        }
        Command::Analyze {
            checkpoint,
            overrides,
            seed,
            out,
        } => {
            let set = with_seed(overrides.set, "data.eval_seed", seed);
            let analysis = commands::cmd_analyze(&checkpoint, &set, out.as_deref())?;
            for f in &analysis.files {
                println!("{}", f.display());
            }
            Ok(EXIT_OK)
        }
        Command::Gradcheck {
            seed,
            seeds,
            inject_fault,
        } => {
            let fault = match inject_fault.as_deref().map(fault_op).transpose() {
                Ok(f) => f,
                Err(error) => return Err(CliError { code: EXIT_USAGE, error }),
            };
            let opts = GradcheckOptions {
                seed,
                seeds,
                fault,
                ..GradcheckOptions::default()
            };
            let report = commands::cmd_gradcheck(&opts)?;
            print!("{}", commands::format_gradcheck(&report));
            if report.passed() {
                println!("gradient checks passed");
                Ok(EXIT_OK)
            } else {
                println!("gradient checks FAILED: {}", report.failing().join(", "));
                Ok(EXIT_VERIFY)
            }
        }
        Command::Config { config, overrides } => {
            let cfg = commands::load_config(config.as_deref(), &overrides.set)?;
            print!("{}", cfg.to_documented());
            Ok(EXIT_OK)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            return ExitCode::from(code as u8);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code as u8)
        }
    }
}
