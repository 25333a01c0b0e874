//! Command-line pipeline over the `staircase` library: train a teacher,
//! prune it, profile its layers, snap the pruned widths, distill students
//! and report.

pub mod commands;
pub mod config;
pub mod error;
pub mod lock;

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use staircase::saliency::PruneMethod;

pub use config::PipelineConfig;
pub use error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "staircase", version, about = "Latency-aware student discovery pipeline")]
pub struct Cli {
    /// TOML configuration file; omitted keys keep their defaults.
    #[arg(short, long, global = true)]
    pub config: Option<PathBuf>,

    /// Override one config key, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,

    /// Output directory (same as `--set out=...`).
    #[arg(short, long, global = true)]
    pub out: Option<PathBuf>,

    /// Global seed (same as `--set seed=...`).
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Method {
    L1,
    Fisher,
    Random,
}

impl From<Method> for PruneMethod {
    fn from(m: Method) -> Self {
        match m {
            Method::L1 => PruneMethod::L1,
            Method::Fisher => PruneMethod::Fisher,
            Method::Random => PruneMethod::Random,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the teacher network.
    Train,
    /// Prune the teacher channel by channel and sample the pruning curve.
    Prune {
        #[arg(long, value_enum)]
        method: Method,
    },
    /// Sweep each prunable layer's width and detect its latency steps.
    Profile {
        /// Synthetic clock instead of wall time: `ceil:<step>:<ns>`, `const:<ns>` or `linear:<ns>`.
        #[arg(long, value_name = "SPEC")]
        fake_timer: Option<String>,
    },
    /// Snap each sampled pruned spec to the nearest optimal widths.
    Discover {
        /// Pruning curve to snap.
        #[arg(long, value_enum, default_value = "fisher")]
        method: Method,
    },
    /// Train the snapped students with attention transfer.
    Distill {
        /// Also train each student from scratch as a baseline.
        #[arg(long)]
        scratch: bool,
        /// Only this student.
        #[arg(long)]
        sample: Option<usize>,
    },
    /// Measure every finished run and write report.csv.
    Report,
}

pub fn run(cli: Cli) -> Result<()> {
    let mut sets = cli.set;
    if let Some(out) = cli.out {
        sets.push(format!("out={}", toml::Value::String(out.display().to_string())));
    }
    if let Some(seed) = cli.seed {
        sets.push(format!("seed={seed}"));
    }
    let cfg = PipelineConfig::load(cli.config.as_deref(), &sets)?;
    match cli.command {
        Command::Train => commands::cmd_train(&cfg),
        Command::Prune { method } => commands::cmd_prune(&cfg, method.into()),
        Command::Profile { fake_timer } => commands::cmd_profile(&cfg, fake_timer.as_deref()).map(|_| ()),
        Command::Discover { method } => commands::cmd_discover(&cfg, method.into()),
        Command::Distill { scratch, sample } => commands::cmd_distill(&cfg, scratch, sample),
        Command::Report => {
            let rows = commands::cmd_report(&cfg)?;
            eprintln!("{} rows written to {}", rows.len(), cfg.out.join(commands::REPORT).display());
            Ok(())
        }
    }
}
