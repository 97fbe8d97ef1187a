//! `tcprune` command-line front end.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 invalid
//! configuration.

pub mod commands;
pub mod config;
pub mod manifest;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use tcprune_core::Error;

use crate::config::{Overrides, RunConfig};
use crate::manifest::RunManifest;

pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "tcprune", version, about = "Channel pruning for domain-adapted CNNs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML config file; flags override its values
    #[arg(long)]
    config: Option<PathBuf>,
    /// Re-execute from a manifest (instead of --config)
    #[arg(long, conflicts_with = "config")]
    manifest: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// tcp, tcp_no_da, two_stage or random
    #[arg(long)]
    method: Option<String>,
    /// Channels removed per iteration
    #[arg(long)]
    k: Option<usize>,
    /// Maximum pruning iterations
    #[arg(long)]
    iters: Option<usize>,
    /// Stop at this fraction of baseline FLOPs
    #[arg(long)]
    flops_target: Option<f64>,
    /// small-vgg or small-resnet
    #[arg(long)]
    arch: Option<String>,
    /// Dataset directory, `synthetic`, or generator overrides `key=value,...`
    #[arg(long)]
    data: Option<String>,
    /// median, fixed:<sigma> or multi
    #[arg(long)]
    mmd: Option<String>,
    /// Write per-channel scores of every iteration
    #[arg(long)]
    score_dump: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic domain pair
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the unpruned domain-adaptation model
    TrainBase {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Prune a base model
    Prune {
        #[command(flatten)]
        common: Common,
        /// Base-model directory; trained in place when absent
        #[arg(long)]
        base: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Target-domain accuracy of a saved model
    Eval {
        #[command(flatten)]
        common: Common,
        /// Model or run directory
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Tabulate run directories
    Report {
        runs: Vec<PathBuf>,
        /// Merged CSV destination
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every method for each seed and merge the reports
    Compare {
        #[command(flatten)]
        common: Common,
        /// Comma-separated seeds
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            method: self.method.clone(),
            k: self.k,
            iters: self.iters,
            flops_target: self.flops_target,
            arch: self.arch.clone(),
            data: self.data.clone(),
            mmd: self.mmd.clone(),
            score_dump: self.score_dump,
        }
    }

    /// Defaults < config file or manifest < flags.
    fn resolve(&self) -> tcprune_core::Result<(RunConfig, Option<RunManifest>)> {
        let (mut cfg, manifest) = match (&self.config, &self.manifest) {
            (Some(p), _) => (RunConfig::load(p)?, None),
            (None, Some(p)) => {
                let m = RunManifest::load(p)?;
                (m.config.clone(), Some(m))
            }
            (None, None) => (RunConfig::default(), None),
        };
        cfg.apply(&self.overrides())?;
        cfg.validate()?;
        Ok((cfg, manifest))
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Usage(_) => EXIT_USAGE,
        Error::Config(_) => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

fn execute(cmd: Command) -> tcprune_core::Result<()> {
    match cmd {
        Command::GenData { common, out } => {
            let (mut cfg, _) = common.resolve()?;
            commands::gen_data(&mut cfg, &out)
        }
        Command::TrainBase { common, out } => {
            let (mut cfg, _) = common.resolve()?;
            commands::train_base_cmd(&mut cfg, &out)
        }
        Command::Prune { common, base, out } => {
            let (mut cfg, manifest) = common.resolve()?;
            let base = base.or_else(|| manifest.as_ref().and_then(|m| m.base.clone().map(PathBuf::from)));
            commands::prune_cmd(&mut cfg, base.as_deref(), &out, manifest.as_ref())
        }
        Command::Eval { common, model, out } => {
            let (mut cfg, _) = common.resolve()?;
            commands::eval_cmd(&mut cfg, &model, out.as_deref())
        }
        Command::Report { runs, out } => commands::report_cmd(&runs, out.as_deref()),
        Command::Compare { common, seeds, out } => {
            let (cfg, _) = common.resolve()?;
            commands::compare_cmd(&cfg, &seeds, &out).map(|_| ())
        }
    }
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn dispatch(argv: Vec<String>) -> i32 {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
