//! Command-line experiment driver: simulate epidemics, partition networks,
//! train federated models and export sweep results.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;
pub mod pipeline;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use config::Config;
pub use error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "epifed", version, about = "Epidemic simulation and federated node-state prediction")]
pub struct Cli {
    /// TOML configuration file; built-in defaults when omitted.
    #[arg(short, long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set training.rounds=50`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
    /// Master seed (same as `--set seed=N`).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (same as `--set out_dir=DIR`).
    #[arg(long, global = true)]
    pub out_dir: Option<String>,
    /// More log output; repeat for debug level.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate an epidemic and write the trajectory file.
    Simulate {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Partition the network into clients and write `node,client` CSV.
    Partition {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one configuration and write metrics, round logs and checkpoints.
    Train,
    /// Run a grid of configurations and write a long-format results table.
    Sweep,
    /// Turn a results table into per-figure CSVs.
    Plotdata {
        #[arg(long)]
        results: PathBuf,
        #[arg(long, value_enum)]
        family: commands::Family,
        #[arg(long, default_value = "acc")]
        metric: String,
    },
    /// Print size, degree and spectral facts about the configured network.
    GraphInfo,
}

impl Cli {
    /// Configuration file, then `--set` overrides, then the dedicated flags.
    pub fn config(&self) -> CliResult<Config> {
        let mut overrides = self.set.clone();
        if let Some(seed) = self.seed {
            overrides.push(format!("seed={seed}"));
        }
        if let Some(dir) = &self.out_dir {
            overrides.push(format!("out_dir={}", toml::Value::String(dir.clone())));
        }
        Config::load(self.config.as_deref(), &overrides)
    }
}

pub fn run(cli: &Cli) -> CliResult<String> {
    let cfg = cli.config()?;
    match &cli.command {
        Command::Simulate { out } => commands::simulate(&cfg, out.as_deref()),
        Command::Partition { out } => commands::partition(&cfg, out.as_deref()),
        Command::Train => commands::train(&cfg),
        Command::Sweep => commands::sweep(&cfg),
        Command::Plotdata { results, family, metric } => commands::plotdata(&cfg, results, *family, metric),
        Command::GraphInfo => commands::graph_info(&cfg),
    }
}
