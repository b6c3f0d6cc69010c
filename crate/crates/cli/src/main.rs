//! `rca`: simulate the plant, inject faults, fit lagged models, attribute
//! peaks to noise terms, and run the full benchmark.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rca_core::attribution::Aggregation;
use rca_core::graph::Mode;
use rca_core::pipeline::BenchParams;

use commands::{CliError, Ctx};

#[derive(Parser)]
#[command(name = "rca", version, about = "Root-cause attribution for grid peaks")]
struct Cli {
    /// Artifact root. Falls back to $RCA_OUT, then ./rca-out.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Plant configuration TOML. Bundled calibration when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Truncated,
    NonTruncated,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Mode {
        match m {
            ModeArg::Truncated => Mode::Truncated,
            ModeArg::NonTruncated => Mode::NonTruncated,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum AggArg {
    Max,
    Sum,
}

impl From<AggArg> for Aggregation {
    fn from(a: AggArg) -> Aggregation {
        match a {
            AggArg::Max => Aggregation::Max,
            AggArg::Sum => Aggregation::Sum,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one fault-free plant run and write the trace.
    Simulate {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// First minute of the run.
        #[arg(long, default_value_t = 0)]
        t_start: usize,
        /// Minutes to simulate. Zero writes a header-only trace.
        #[arg(long)]
        duration: usize,
    },
    /// Simulate a paired faulty/baseline run with one injected fault.
    Inject {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Fault to inject, by label (see `inject --kind help`).
        #[arg(long)]
        kind: String,
        /// Minute the fault starts.
        #[arg(long)]
        t_i: usize,
        /// Fault duration; each kind's calibrated duration when omitted.
        #[arg(long)]
        duration: Option<usize>,
        /// Minutes after the fault start in which peaks count.
        #[arg(long, default_value_t = 60)]
        tau: usize,
        /// Extra simulated minutes after the peak window.
        #[arg(long, default_value_t = 30)]
        trailing: usize,
    },
    /// Fit lagged models and the walk-back tree from fault-free runs.
    Fit {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 3)]
        train_runs: usize,
        /// Length of each training run in minutes, warmup included.
        #[arg(long, default_value_t = 44_640)]
        train_minutes: usize,
        /// Window depths to fit, e.g. --lags 0,3,7.
        #[arg(long, value_delimiter = ',', required = true)]
        lags: Vec<u32>,
        /// How parents beyond the window are handled.
        #[arg(long, value_enum, default_value_t = ModeArg::Truncated)]
        mode: ModeArg,
    },
    /// Score one minute of a trace against a fitted model.
    Attribute {
        /// Fitted model JSON written by `fit` or `bench`.
        #[arg(long)]
        model: PathBuf,
        /// Trace CSV written by `simulate` or `inject`.
        #[arg(long)]
        trace: PathBuf,
        /// Minute to score.
        #[arg(long)]
        t: usize,
        /// How per-lag contributions fold into one score per node.
        #[arg(long, value_enum, default_value_t = AggArg::Max)]
        agg: AggArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Monte Carlo samples per coalition.
        #[arg(long, default_value_t = 2_000)]
        samples: usize,
        /// Sampled permutations for the Shapley estimate.
        #[arg(long, default_value_t = 200)]
        permutations: usize,
    },
    /// Per-noise-term breakdown at one minute: contributions with the
    /// observed noise and its training quartile band.
    Explain {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        t: usize,
        /// Restrict the table to these nodes (repeatable).
        #[arg(long = "node")]
        nodes: Vec<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 2_000)]
        samples: usize,
        #[arg(long, default_value_t = 200)]
        permutations: usize,
    },
    /// Full benchmark: train, inject faults, score peaks, render the report.
    Bench {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Window depths for truncated models, e.g. --truncated 0,3,7,10.
        #[arg(long, value_delimiter = ',', default_values_t = [0, 3, 7, 10])]
        truncated: Vec<u32>,
        /// Window depths for non-truncated models.
        #[arg(long, value_delimiter = ',', num_args = 0.., default_values_t = Vec::<u32>::new())]
        non_truncated: Vec<u32>,
        /// Skip the walk-back baseline.
        #[arg(long)]
        no_heuristic: bool,
        #[arg(long, default_value_t = 3)]
        train_runs: usize,
        #[arg(long, default_value_t = 44_640)]
        train_minutes: usize,
        /// Paired runs per injection kind.
        #[arg(long, default_value_t = 10)]
        cases: usize,
        /// Minute each fault starts.
        #[arg(long, default_value_t = 3_720)]
        t_i: usize,
        #[arg(long, default_value_t = 60)]
        tau: usize,
        #[arg(long, default_value_t = 30)]
        trailing: usize,
        #[arg(long, default_value_t = 2_000)]
        samples: usize,
        #[arg(long, default_value_t = 200)]
        permutations: usize,
    },
    /// Render tables and plot data from benchmark rows.
    Report {
        /// Row CSV written by `bench`.
        #[arg(long)]
        rows: PathBuf,
        /// Cutoffs for the hit-rate tables.
        #[arg(long = "k", value_delimiter = ',', default_values_t = [1usize, 3, 5])]
        ks: Vec<usize>,
        /// Peak delay cap for the fast subset of the offset table.
        #[arg(long, default_value_t = 10)]
        max_delay: i64,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let ctx = Ctx::new(cli.out, cli.config)?;
    match cli.command {
        Command::Simulate { seed, t_start, duration } => {
            commands::cmd_simulate(&ctx, seed, t_start, duration)?;
        }
        Command::Inject { seed, kind, t_i, duration, tau, trailing } => {
            commands::cmd_inject(&ctx, seed, &kind, t_i, duration, tau, trailing)?;
        }
        Command::Fit { seed, train_runs, train_minutes, lags, mode } => {
            commands::cmd_fit(&ctx, seed, train_runs, train_minutes, &lags, mode.into())?;
        }
        Command::Attribute { model, trace, t, agg, seed, samples, permutations } => {
            commands::cmd_attribute(
                &ctx,
                &model,
                &trace,
                t,
                agg.into(),
                seed,
                samples,
                permutations,
            )?;
        }
        Command::Explain { model, trace, t, nodes, seed, samples, permutations } => {
            commands::cmd_explain(&ctx, &model, &trace, t, &nodes, seed, samples, permutations)?;
        }
        Command::Bench {
            seed,
            truncated,
            non_truncated,
            no_heuristic,
            train_runs,
            train_minutes,
            cases,
            t_i,
            tau,
            trailing,
            samples,
            permutations,
        } => {
            let params = BenchParams {
                master_seed: seed,
                train_runs,
                train_minutes,
                cases_per_kind: cases,
                t_i,
                tau,
                trailing,
                samples,
                permutations,
            };
            commands::cmd_bench(&ctx, &truncated, &non_truncated, !no_heuristic, params)?;
        }
        Command::Report { rows, ks, max_delay } => {
            commands::cmd_report(&ctx, &rows, &ks, max_delay)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.code());
            ExitCode::FAILURE
        }
    }
}
