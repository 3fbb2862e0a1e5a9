//! Benchmark and analysis driver for the mire library.
//!
//! Every subcommand resolves its settings from defaults < config file <
//! flags, serializes the resolved spec, and writes all artifacts under
//! `<out>/<command>-<spec hash>/`, so distinct invocations never collide
//! and identical ones land in the same place with identical bytes.

mod bench;
mod gradcheck;
mod meanerr;
mod spec;
mod table;
mod theorycmd;
mod transfer;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use mire::trainer::Method;

use spec::{load_file_config, parse_lambdas, parse_seeds, resolve_train, FileConfig, Format, Knobs};

/// Where a command wrote and which cells, if any, failed.
pub struct Outcome {
    pub dir: PathBuf,
    pub failures: Vec<String>,
}

#[derive(Args)]
struct IoArgs {
    /// Output root; artifacts land in a per-spec subdirectory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// JSON config file with the same keys as the flags; flags win.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Table format. summary.json is always JSON.
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

/// Seeds spec: "0..9" (inclusive), "7", or a comma mix.
#[derive(Args)]
struct SeedArgs {
    #[arg(long)]
    seeds: Option<String>,
}

impl SeedArgs {
    fn resolve(&self, file: &FileConfig) -> Result<Vec<u64>> {
        let text = self
            .seeds
            .as_deref()
            .or(file.seeds.as_deref())
            .unwrap_or("0..9");
        parse_seeds(text)
    }
}

fn resolve_method(flag: Option<&str>, file: &FileConfig, default: &str) -> Result<Method> {
    let name = flag.or(file.method.as_deref()).unwrap_or(default);
    Method::parse(name).context("resolving method")
}

#[derive(Parser)]
#[command(
    name = "mire",
    version,
    about = "Online class-incremental learning benchmark on synthetic streams"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one method across seeds; emits per-run tables and checkpoints.
    Run {
        #[command(flatten)]
        io: IoArgs,
        #[command(flatten)]
        seeds: SeedArgs,
        /// finetune | ms-ncm | mire | mire++ | mire++-noreplay
        #[arg(long)]
        method: Option<String>,
        #[command(flatten)]
        knobs: Knobs,
    },
    /// Run every ablation cell across seeds and tabulate the component grid.
    Ablate {
        #[command(flatten)]
        io: IoArgs,
        #[command(flatten)]
        seeds: SeedArgs,
        #[command(flatten)]
        knobs: Knobs,
    },
    /// Train on the first task only, then measure per-task transfer gaps.
    FwdTransfer {
        #[command(flatten)]
        io: IoArgs,
        #[command(flatten)]
        seeds: SeedArgs,
        /// Passes over the first task's batches.
        #[arg(long)]
        epochs: Option<usize>,
        #[command(flatten)]
        knobs: Knobs,
    },
    /// Track both class-mean estimators' errors over a full run.
    MeanError {
        #[command(flatten)]
        io: IoArgs,
        #[command(flatten)]
        seeds: SeedArgs,
        #[arg(long)]
        method: Option<String>,
        #[command(flatten)]
        knobs: Knobs,
    },
    /// Maximize the rebalanced discrete objective and check the regime
    /// the optimum lands in on each side of lambda = 1.
    Theory {
        #[command(flatten)]
        io: IoArgs,
        /// Comma-separated lambda values.
        #[arg(long)]
        lambdas: Option<String>,
        #[arg(long, default_value_t = 2)]
        classes: usize,
        #[arg(long, default_value_t = 8)]
        codes: usize,
        /// Ascent restarts per lambda.
        #[arg(long, default_value_t = 64)]
        starts: usize,
        #[arg(long, default_value_t = 0.1)]
        step: f64,
        #[arg(long, default_value_t = 10_000)]
        max_iters: usize,
        /// Fixed-point tolerance on the projected step.
        #[arg(long, default_value_t = 1e-10)]
        tol: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Compare analytic loss gradients against central finite differences
    /// over many fresh inits; nonzero exit if any check exceeds tolerance.
    Gradcheck {
        #[command(flatten)]
        io: IoArgs,
        #[arg(long, default_value_t = 50)]
        trials: u64,
        #[arg(long, default_value_t = 1e-5)]
        fd_step: f64,
        /// Bound on the scale-relative gradient error.
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[arg(long, default_value_t = 6)]
        input_dim: usize,
        /// Trunk hidden widths, comma separated.
        #[arg(long, default_value = "12")]
        hidden: String,
        #[arg(long, default_value_t = 8)]
        feature_dim: usize,
        #[arg(long, default_value_t = 8)]
        head_hidden: usize,
        #[arg(long, default_value_t = 4)]
        head_out: usize,
        #[arg(long, default_value_t = 12)]
        batch: usize,
        #[arg(long, default_value_t = 0.01)]
        cc_weight: f64,
    },
}

/// `MIRE_WORKERS=N` sizes the rayon pool; 1 means sequential and is handled
/// by the execution-mode switch without touching the pool.
fn init_workers() {
    #[cfg(feature = "parallel")]
    if let Ok(v) = std::env::var("MIRE_WORKERS") {
        if let Ok(n) = v.trim().parse::<usize>() {
            if n >= 2 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}

fn dispatch(cli: Cli) -> Result<Outcome> {
    match cli.command {
        Command::Run {
            io,
            seeds,
            method,
            knobs,
        } => {
            let file = load_file_config(io.config.as_deref())?;
            let cfg = resolve_train(&knobs, &file)?;
            let method = resolve_method(method.as_deref(), &file, "mire++")?;
            let seeds = seeds.resolve(&file)?;
            bench::cmd_run(&io.out, io.format, &cfg, method, &seeds)
        }
        Command::Ablate { io, seeds, knobs } => {
            let file = load_file_config(io.config.as_deref())?;
            let cfg = resolve_train(&knobs, &file)?;
            let seeds = seeds.resolve(&file)?;
            bench::cmd_ablate(&io.out, io.format, &cfg, &seeds)
        }
        Command::FwdTransfer {
            io,
            seeds,
            epochs,
            knobs,
        } => {
            let file = load_file_config(io.config.as_deref())?;
            let cfg = resolve_train(&knobs, &file)?;
            let seeds = seeds.resolve(&file)?;
            let epochs = epochs.or(file.epochs).unwrap_or(5);
            transfer::cmd_fwd_transfer(&io.out, io.format, &cfg, &seeds, epochs)
        }
        Command::MeanError {
            io,
            seeds,
            method,
            knobs,
        } => {
            let file = load_file_config(io.config.as_deref())?;
            let cfg = resolve_train(&knobs, &file)?;
            let method = resolve_method(method.as_deref(), &file, "mire++")?;
            let seeds = seeds.resolve(&file)?;
            meanerr::cmd_mean_error(&io.out, io.format, &cfg, method, &seeds)
        }
        Command::Theory {
            io,
            lambdas,
            classes,
            codes,
            starts,
            step,
            max_iters,
            tol,
            seed,
        } => {
            let file = load_file_config(io.config.as_deref())?;
            let text = lambdas
                .as_deref()
                .or(file.lambdas.as_deref())
                .unwrap_or("0.5,1.5");
            let args = theorycmd::TheoryArgs {
                classes,
                codes,
                lambdas: parse_lambdas(text)?,
                starts,
                step,
                max_iters,
                tol,
                seed,
            };
            theorycmd::cmd_theory(&io.out, io.format, &args)
        }
        Command::Gradcheck {
            io,
            trials,
            fd_step,
            tolerance,
            input_dim,
            hidden,
            feature_dim,
            head_hidden,
            head_out,
            batch,
            cc_weight,
        } => {
            let hidden = hidden
                .split(',')
                .map(|p| {
                    p.trim()
                        .parse::<usize>()
                        .with_context(|| format!("bad hidden width {p:?}"))
                })
                .collect::<Result<Vec<_>>>()?;
            let args = gradcheck::GradCheckArgs {
                trials,
                fd_step,
                tolerance,
                input_dim,
                hidden,
                feature_dim,
                head_hidden,
                head_out,
                batch,
                cc_weight,
            };
            gradcheck::cmd_gradcheck(&io.out, io.format, &args)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_workers();
    match dispatch(cli) {
        Ok(outcome) => {
            println!("artifacts: {}", outcome.dir.display());
            if outcome.failures.is_empty() {
                ExitCode::SUCCESS
            } else {
                eprintln!("{} failed cell(s):", outcome.failures.len());
                for f in &outcome.failures {
                    eprintln!("  {f}");
                }
                ExitCode::FAILURE
            }
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
