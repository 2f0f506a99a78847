use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use drf_conformal::conformal::QuantileMode;
use drf_conformal::experiment::{
    cmd_calibrate, cmd_evaluate, cmd_intervals, cmd_report, cmd_synth, cmd_train, AggregateRow, ExperimentConfig,
    Method, ENV_THREADS,
};
use drf_conformal::{Error, Result};

/// Conformal prediction intervals from deep regression forest,
/// MC-dropout and residual-forest uncertainty.
#[derive(Parser)]
#[command(name = "drfcp", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Override the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the quantile mode (finite_sample or plain).
    #[arg(long = "quantile-mode")]
    quantile_mode: Option<QuantileMode>,
    /// Restrict to these methods (repeatable or comma separated).
    #[arg(long, value_delimiter = ',')]
    method: Vec<Method>,
    /// Restrict to these confidence levels (repeatable or comma separated).
    #[arg(long, value_delimiter = ',')]
    cl: Vec<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Write train/cal/test CSVs for every partition.
    Synth(Common),
    /// Train and persist the models the method list needs.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        partition: Option<usize>,
    },
    /// Compute calibration quantiles from persisted models.
    Calibrate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        partition: Option<usize>,
    },
    /// Evaluate all cells and write reports.
    Evaluate(Common),
    /// Write per-sample intervals for one method, level and partition.
    Intervals {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        partition: usize,
        /// Keep only the first N test samples.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Rebuild aggregate tables from the run reports.
    Report(Common),
}

fn load(common: &Common) -> Result<ExperimentConfig> {
    let mut config = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(mode) = common.quantile_mode {
        config.quantile_mode = mode;
    }
    if !common.method.is_empty() {
        config.methods = common.method.clone();
    }
    if !common.cl.is_empty() {
        config.confidence_levels = common.cl.clone();
    }
    config.validate()?;
    Ok(config)
}

fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var(ENV_THREADS) else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .map_err(|_| Error::Config(format!("{ENV_THREADS}={value:?} is not a thread count")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("cannot configure {n} threads: {e}")))
}

fn print_rows(rows: &[AggregateRow]) {
    println!("{:<24} {:>5} {:>9} {:>10} {:>7} {:>7}", "method", "cl", "coverage", "width", "r2", "mad");
    for r in rows {
        println!(
            "{:<24} {:>5} {:>9.5} {:>10.5} {:>7.4} {:>7.5}",
            r.method, r.confidence_level, r.coverage, r.mean_width, r.r2, r.mad_conditional_coverage
        );
    }
}

fn single<T: Copy + std::fmt::Debug>(values: &[T], what: &str) -> Result<T> {
    match values {
        [v] => Ok(*v),
        _ => Err(Error::Config(format!("intervals needs exactly one --{what}, got {values:?}"))),
    }
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    match cli.command {
        Command::Synth(common) => {
            let files = cmd_synth(&load(&common)?)?;
            println!("wrote {} files", files.len());
        }
        Command::Train { common, partition } => {
            let files = cmd_train(&load(&common)?, partition)?;
            println!("wrote {} files", files.len());
        }
        Command::Calibrate { common, partition } => {
            for r in cmd_calibrate(&load(&common)?, partition)? {
                println!("{} cl={} partition={} q_hat={}", r.method, r.confidence_level, r.partition, r.q_hat);
            }
        }
        Command::Evaluate(common) => print_rows(&cmd_evaluate(&load(&common)?)?),
        Command::Intervals {
            common,
            partition,
            limit,
        } => {
            let method = single(&common.method, "method")?;
            let cl = single(&common.cl, "cl")?;
            let (csv, plot) = cmd_intervals(&load(&common)?, method, cl, partition, limit)?;
            println!("{}\n{}", csv.display(), plot.display());
        }
        Command::Report(common) => print_rows(&cmd_report(&load(&common)?)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
