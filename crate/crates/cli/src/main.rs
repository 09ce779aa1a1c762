mod bench;
mod commands;
mod config;
mod pipeline;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use flowcast::forecast::PointStatistic;
use flowcast::ErrorClass;

use pipeline::Split;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numeric(String),
    #[error(transparent)]
    Lib(#[from] flowcast::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Lib(e) => match e.class() {
                ErrorClass::Usage => 1,
                ErrorClass::Data => 2,
                ErrorClass::Numeric => 3,
            },
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "flowcast", version, about = "Particle-flow state-space forecasting")]
struct Cli {
    /// Worker threads for the per-window pool; 1 gives bit-reproducible runs.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.lr0=0.005`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit a model; writes checkpoint, epoch log and resolved config.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample forecasts for every window of a split.
    Forecast {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Run config; defaults to the one stored in the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Series file; overrides `data.path`.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
        #[arg(long, default_value_t = 10)]
        particles: usize,
        #[arg(long, value_enum)]
        point: Option<PointArg>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score forecast files against the truth file.
    Evaluate {
        #[arg(long)]
        samples: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// Summary file whose `point` column gives the point forecast;
        /// defaults to the sample mean.
        #[arg(long)]
        summary: Option<PathBuf>,
        /// 1-based horizons; default 3,6,9,12 (those within Q).
        #[arg(long, value_delimiter = ',')]
        horizons: Option<Vec<usize>>,
        #[arg(long, default_value_t = flowcast::metrics::MAPE_MASK)]
        mape_mask: f64,
        /// Report CSV; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Flow vs bootstrap particle filter vs Kalman on synthetic SSMs.
    FilterBench {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic dataset with its exact generating model.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum PointArg {
    Mean,
    Median,
}

impl From<PointArg> for PointStatistic {
    fn from(p: PointArg) -> Self {
        match p {
            PointArg::Mean => PointStatistic::Mean,
            PointArg::Median => PointStatistic::Median,
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(k) = cli.threads {
        if k == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(k)
            .build_global()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    match cli.command {
        Command::Train { common, out } => commands::train(common.config.as_deref(), &common.overrides, common.seed, &out),
        Command::Forecast {
            checkpoint,
            config,
            overrides,
            data,
            split,
            particles,
            point,
            seed,
            out,
        } => commands::forecast(&commands::ForecastArgs {
            checkpoint,
            config,
            overrides,
            data,
            split,
            particles,
            point: point.map(Into::into),
            seed,
            out,
        }),
        Command::Evaluate {
            samples,
            truth,
            summary,
            horizons,
            mape_mask,
            out,
        } => commands::evaluate(&samples, &truth, summary.as_deref(), horizons, mape_mask, out.as_deref()),
        Command::FilterBench { common, out } => {
            let cfg: config::BenchConfig = config::load(common.config.as_deref(), &common.overrides)?;
            bench::validate(&cfg)?;
            bench::run(&cfg, common.seed.unwrap_or(0), &out)
        }
        Command::Synth { common, out } => commands::synth(common.config.as_deref(), &common.overrides, common.seed, &out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
