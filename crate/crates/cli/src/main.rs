//! `dauction`: train, evaluate and inspect double-auction mechanisms.
//!
//! Exit codes: 0 success, 1 property violation, 2 configuration or input
//! error, 3 numeric failure during training.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("property violation: {0}")]
    Violation(String),
    #[error(transparent)]
    Core(#[from] dauction::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Violation(_) => 1,
            CliError::Core(dauction::Error::NonFinite { .. }) => 3,
            _ => 2,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "dauction", version, about = "Learned and classical double-auction mechanisms")]
struct Cli {
    /// Worker threads for evaluation; results do not depend on this.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long, short)]
    config: Option<PathBuf>,

    /// Override a configuration key, e.g. `--set train.epochs=1`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Output directory. Defaults to the config's `out_dir`, then
    /// $DAUCTION_OUT, then `runs`.
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model and write its checkpoint, log and run manifest.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from a resumable checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Compare a model with MD and VCG on a benchmark setting.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Model checkpoint; without one only the protocols are evaluated.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// 2x2, 3x3, 5x5 or 5x5:<seed>; overrides `eval.setting`.
        #[arg(long)]
        setting: Option<String>,
    },
    /// Record a mechanism's outcomes over a grid of bids.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// `<n>x<m>:<free coords>[;<coord>=<value>]...[;step=<s>]`, e.g.
        /// `1x1:b0,s0` or `2x1:b0,b1;s0=0.5`.
        #[arg(long)]
        spec: String,
        #[arg(long, conflicts_with = "protocol", required_unless_present = "protocol")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        protocol: Option<Protocol>,
        /// File name inside the output directory.
        #[arg(long, default_value = "sweep.csv")]
        name: String,
    },
    /// Welfare and deficit of MD and VCG on the benchmark settings.
    Baseline {
        #[command(flatten)]
        common: Common,
        /// Settings to evaluate; all three by default.
        #[arg(long = "setting")]
        settings: Vec<String>,
        /// Use uniform samples instead of the grids for 2x2 and 3x3.
        #[arg(long)]
        sampled: bool,
    },
    /// Run the property checks; exits 1 if any fails.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the report as JSON to this path.
        #[arg(long)]
        json: Option<PathBuf>,
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Protocol {
    Md,
    Vcg,
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(threads) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| CliError::Config(format!("--threads {threads}: {e}")))?;
    }
    let threads = cli.threads.unwrap_or_else(rayon::current_num_threads);
    match cli.command {
        Command::Train { common, resume } => commands::train(&common, resume.as_deref(), threads),
        Command::Eval {
            common,
            checkpoint,
            setting,
        } => commands::eval(&common, checkpoint.as_deref(), setting, threads),
        Command::Sweep {
            common,
            spec,
            checkpoint,
            protocol,
            name,
        } => commands::sweep(&common, &spec, checkpoint.as_deref(), protocol, &name, threads),
        Command::Baseline {
            common,
            settings,
            sampled,
        } => commands::baseline(&common, &settings, sampled, threads),
        Command::Verify {
            seed,
            json,
            inject_fault,
        } => commands::verify(seed, json.as_deref(), inject_fault),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
