//! `abplanner` command-line driver.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.

use std::path::PathBuf;
use std::process::ExitCode;

use abplanner::config::ExperimentConfig;
use abplanner::env::Split;
use abplanner::experiment;
use abplanner::Error;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "abplanner", version, about = "Train and evaluate budget planners for auto-bidding")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Experiment configuration (TOML)
    #[arg(long)]
    config: PathBuf,
    /// Override the configured seed
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory (for export-logs: the log file)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for collection and evaluation (default: all cores)
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the configured planner
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a planner against the planner-free bidder on held-out advertisers
    Eval {
        #[command(flatten)]
        common: Common,
        /// Trained planner checkpoint; defaults to planner.checkpoint
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train and evaluate one planner per stage count
    SweepStages {
        #[command(flatten)]
        common: Common,
        /// Comma-separated stage counts
        #[arg(long, value_delimiter = ',', default_value = "3,4,5,6,9,12")]
        stages: Vec<usize>,
    },
    /// Write generated impression streams in the replay log format
    ExportLogs {
        #[command(flatten)]
        common: Common,
        /// Number of advertisers to export
        #[arg(long, default_value_t = 10)]
        advertisers: u64,
        #[arg(long, value_enum, default_value_t = SplitArg::Train)]
        split: SplitArg,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Eval,
}

/// A failure and the exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::InvalidArgument(_) => 1,
            _ => 2,
        };
        Failure { code, message: e.to_string() }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure { code: 1, message: message.into() }
}

/// Loads the config with command-line overrides; every failure here is a
/// configuration error.
fn load(common: &Common) -> Result<ExperimentConfig, Failure> {
    let mut cfg = ExperimentConfig::load(&common.config).map_err(|e| usage(e.to_string()))?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(workers) = common.workers {
        if workers == 0 {
            return Err(usage("--workers must be >= 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build_global()
            .map_err(|e| Failure { code: 2, message: format!("starting worker pool: {e}") })?;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Failure> {
    let mut progress = |line: &str| log::info!("{line}");
    match cli.command {
        Command::Train { common } => {
            let mut cfg = load(&common)?;
            if let Some(out) = common.out {
                cfg.output.dir = out;
            }
            let summary = experiment::train(&cfg, &mut progress)?;
            println!("checkpoint: {}", summary.checkpoint.display());
            println!("metrics: {}", summary.out_dir.join(experiment::METRICS_FILE).display());
        }
        Command::Eval { common, checkpoint } => {
            let mut cfg = load(&common)?;
            if let Some(out) = common.out {
                cfg.output.dir = out;
            }
            let eval = experiment::evaluate(&cfg, checkpoint.as_deref())?;
            let last = eval.last_row();
            println!(
                "{} episode {}: mean return {:.4}, improvement over vanilla {:.4} [{:.4}, {:.4}]",
                eval.planner, last.episode_index, last.mean_return, last.improvement, last.improvement_ci_low, last.improvement_ci_high
            );
            println!("tables: {}", cfg.output.dir.display());
        }
        Command::SweepStages { common, stages } => {
            let mut cfg = load(&common)?;
            if let Some(out) = common.out {
                cfg.output.dir = out;
            }
            let rows = experiment::sweep_stages(&cfg, &stages, &mut progress)?;
            for r in &rows {
                println!("m={} {}: improvement {:.4} [{:.4}, {:.4}]", r.stages, r.run_id, r.improvement, r.improvement_ci_low, r.improvement_ci_high);
            }
        }
        Command::ExportLogs { common, advertisers, split } => {
            let cfg = load(&common)?;
            let path = common.out.ok_or_else(|| usage("export-logs needs --out <file>"))?;
            let split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Eval => Split::Eval,
            };
            let lines = experiment::export_logs(&cfg, &path, advertisers, split)?;
            println!("wrote {lines} records to {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
