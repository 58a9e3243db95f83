//! Stage orchestration for the `graphguide` binary.

pub mod config;
pub mod manifest;
pub mod report;
pub mod stages;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};

use crate::config::validate_config;
use crate::manifest::RunManifest;
use crate::stages::StageContext;

#[derive(Debug, Parser)]
#[command(
    name = "graphguide",
    version,
    about = "Graph-guided explanation generation pipeline"
)]
pub struct Cli {
    /// Experiment configuration (TOML).
    #[arg(long, global = true, default_value = "graphguide.toml")]
    pub config: PathBuf,
    /// Run only this seed instead of every seed in the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Rerun stages whose inputs are unchanged.
    #[arg(long, global = true)]
    pub force: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the label-only model and capture attention snapshots.
    Extract,
    /// Turn snapshots into explanation graphs.
    BuildGraphs,
    /// Fine-tune the generator, one run per seed.
    Train,
    /// Generate on the test set and score label accuracy, similarity and faithfulness.
    Evaluate,
    /// Aggregate per-seed metrics into one report file.
    Report {
        /// Also render SVG bar charts.
        #[arg(long)]
        plots: bool,
    },
    /// Check the configuration and print it with defaults filled in.
    Validate,
}

pub fn run(cli: Cli) -> Result<()> {
    let config = validate_config(&cli.config)?;
    if let Command::Validate = cli.command {
        print!("{}", toml::to_string_pretty(&config)?);
        return Ok(());
    }
    let seeds = cli.seed.map_or_else(|| config.seeds.clone(), |s| vec![s]);
    let mut ctx = StageContext {
        config: &config,
        manifest: RunManifest::load(config.manifest_path())?,
        force: cli.force,
        device: stages::device()?,
    };
    match cli.command {
        Command::Extract => {
            stages::extract(&mut ctx)?;
        }
        Command::BuildGraphs => {
            stages::build_graphs(&mut ctx)?;
        }
        Command::Train => {
            for s in seeds {
                stages::train(&mut ctx, s)?;
            }
        }
        Command::Evaluate => {
            for s in seeds {
                stages::evaluate(&mut ctx, s)?;
            }
        }
        Command::Report { plots } => {
            stages::report(&mut ctx, &seeds, plots)?;
        }
        Command::Validate => unreachable!(),
    }
    Ok(())
}
