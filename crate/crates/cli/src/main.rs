// `!(x > 0.0)` is used on purpose so NaN fails validation along with
// out-of-range values; indexed loops mirror the per-coordinate formulas.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;
mod error;

use config::{Algo, RunConfig};
use error::{CliError, CliResult};

#[derive(Parser)]
#[command(
    name = "dynshift",
    version,
    about = "LiDAR instance clustering with learnable dynamic shifting"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration, or a JSON report whose embedded config is reused.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides every seed of the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Worker threads; defaults to all cores.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic scenes with offsets and features.
    Gen {
        #[command(flatten)]
        common: Common,
    },
    /// Cluster the things points of every frame.
    Cluster {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Overrides `cluster.algo`.
        #[arg(long, value_enum)]
        algo: Option<Algo>,
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Train a shift model.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Score predictions against ground truth.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Output directory of `cluster`, or a directory of label files.
        #[arg(long)]
        pred: PathBuf,
    },
    /// Write the analysis tables.
    Analyze {
        #[command(flatten)]
        common: Common,
        /// Training frames.
        #[arg(long)]
        data: PathBuf,
        /// Validation frames; defaults to `--data`.
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Gen { common }
            | Command::Cluster { common, .. }
            | Command::Train { common, .. }
            | Command::Eval { common, .. }
            | Command::Analyze { common, .. } => common,
        }
    }
}

fn resolve(common: &Common) -> CliResult<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.apply_seed(seed);
    }
    Ok(cfg)
}

fn run(cli: Cli) -> CliResult<serde_json::Value> {
    let common = cli.command.common();
    if let Some(jobs) = common.jobs {
        if jobs == 0 {
            return Err(CliError::config("--jobs must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| CliError::config(e.to_string()))?;
    }
    let mut cfg = resolve(common)?;
    let out = &common.out;
    match &cli.command {
        Command::Gen { .. } => {
            cfg.validate()?;
            commands::gen(&cfg, out)
        }
        Command::Cluster { data, algo, model, .. } => {
            if let Some(a) = algo {
                cfg.cluster.algo = *a;
            }
            cfg.validate()?;
            commands::cluster(&cfg, cfg.cluster.algo, model.as_deref(), data, out)
        }
        Command::Train { data, .. } => {
            cfg.validate()?;
            commands::train_cmd(&cfg, data, out)
        }
        Command::Eval { data, pred, .. } => {
            cfg.validate()?;
            commands::eval(&cfg, data, pred, out)
        }
        Command::Analyze { data, val, model, .. } => {
            cfg.validate()?;
            commands::analyze(&cfg, data, val.as_deref().unwrap_or(data), model.as_deref(), out)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let err = CliError::config(e.to_string().trim().to_string());
            eprintln!("{}", err.to_json());
            return ExitCode::from(err.exit_code() as u8);
        }
    };
    match run(cli) {
        Ok(summary) => {
            // A closed stdout is not a failure of the run itself.
            let _ = writeln!(std::io::stdout(), "{summary}");
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("{}", err.to_json());
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
