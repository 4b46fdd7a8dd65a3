mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pathrwkv::train::{EvalMode, Precision};
use pathrwkv::verify::VerifyLevel;
use pathrwkv::Error;

use crate::config::RunConfig;

/// Slide-level RWKV models over tile bags: data generation, training,
/// inference and verification.
#[derive(Debug, Parser)]
#[command(name = "pathrwkv", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand. Each can also be set through the
/// environment as `PATHRWKV_<FLAG>`; an explicit flag wins over the
/// environment, which wins over the config file.
#[derive(Debug, Args)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long, env = "PATHRWKV_CONFIG")]
    pub config: Option<PathBuf>,
    #[arg(long, env = "PATHRWKV_SEED")]
    pub seed: Option<u64>,
    /// Evaluation structure: recurrent (all tiles) or sampled.
    #[arg(long, env = "PATHRWKV_MODE")]
    pub mode: Option<EvalMode>,
    #[arg(long, env = "PATHRWKV_BAG_SIZE")]
    pub bag_size: Option<usize>,
    #[arg(long, env = "PATHRWKV_MAX_N_TILES")]
    pub max_n_tiles: Option<usize>,
    #[arg(long, env = "PATHRWKV_EPOCHS")]
    pub epochs: Option<usize>,
    #[arg(long, env = "PATHRWKV_WORKERS")]
    pub workers: Option<usize>,
    /// f32 or f64.
    #[arg(long, env = "PATHRWKV_PRECISION")]
    pub precision: Option<Precision>,
    /// Overwrite existing outputs.
    #[arg(long, env = "PATHRWKV_FORCE")]
    pub force: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset of embedded slides.
    Gen {
        /// Output directory (default: `data_dir` of the config).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Number of slides.
        #[arg(long)]
        slides: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Train a model and evaluate it on the held-out split.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Checkpoint path (default: `checkpoint` of the config).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Run summary file, one JSON record per run appended.
        #[arg(long)]
        summary: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint on the held-out split of a dataset.
    Eval {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Predict every task for one or more bag files.
    Infer {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(required = true)]
        slides: Vec<PathBuf>,
        /// Print one JSON record per slide instead of text.
        #[arg(long)]
        json: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Run the property suite.
    Verify {
        #[arg(long)]
        level: Option<VerifyLevel>,
        /// Swap the max combine for a mean (checks that the suite notices).
        #[arg(long, hide = true)]
        mutate_comb: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Train and evaluate one model per value of an ablation axis.
    Ablate {
        /// sampling, structure, max_n_tiles, mtl_grouping, mtl_design, pe or dim.
        axis: String,
        /// Comma-separated axis values (default: the axis grid).
        #[arg(long, value_delimiter = ',')]
        grid: Vec<String>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Time recurrent inference against quadratic attention over N.
    Bench {
        /// Comma-separated slide sizes.
        #[arg(long, value_delimiter = ',')]
        n_grid: Vec<usize>,
        #[command(flatten)]
        common: Common,
    },
}

impl Common {
    /// The config file (or defaults) with flag and environment overrides.
    fn resolve(&self) -> Result<RunConfig, Error> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.mode {
            cfg.mode = v;
        }
        if let Some(v) = self.bag_size {
            cfg.bag_size = v;
        }
        if let Some(v) = self.max_n_tiles {
            cfg.max_n_tiles = v;
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
            if cfg.warmup_epochs >= v {
                cfg.warmup_epochs = v / 5;
            }
        }
        if let Some(v) = self.workers {
            cfg.workers = v;
        }
        if let Some(v) = self.precision {
            cfg.precision = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Exit code for a library error.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Contract(_) => 1,
        Error::Format { .. } | Error::EmptySlide(_) | Error::Io { .. } | Error::Data(_) | Error::Dimension(_) => 2,
        Error::NonFinite(_) | Error::Undefined(_) => 3,
    }
}

fn run(cli: Cli) -> Result<u8, Error> {
    match cli.command {
        Command::Gen { out, slides, common } => {
            let mut cfg = common.resolve()?;
            if let Some(n) = slides {
                cfg.n_slides = n;
            }
            commands::gen(&cfg, out, common.force)
        }
        Command::Train {
            data,
            out,
            summary,
            common,
        } => commands::train(&common.resolve()?, data, out, summary),
        Command::Eval {
            data,
            checkpoint,
            common,
        } => commands::eval(&common.resolve()?, data, checkpoint),
        Command::Infer {
            checkpoint,
            slides,
            json,
            common,
        } => commands::infer(&common.resolve()?, checkpoint, &slides, json),
        Command::Verify {
            level,
            mutate_comb,
            common,
        } => {
            let mut cfg = common.resolve()?;
            if let Some(l) = level {
                cfg.verify_level = l;
            }
            commands::verify(&cfg, mutate_comb)
        }
        Command::Ablate {
            axis,
            grid,
            data,
            common,
        } => {
            let mut cfg = common.resolve()?;
            if !grid.is_empty() {
                cfg.ablation_grid = grid;
            }
            commands::ablate(&cfg, &axis, data)
        }
        Command::Bench { n_grid, common } => {
            let mut cfg = common.resolve()?;
            if !n_grid.is_empty() {
                cfg.bench_n = n_grid;
            }
            commands::bench(&cfg)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
