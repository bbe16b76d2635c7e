use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::commands::{default_out, run, Command, Diagnostic, RunOptions};
use crate::config::{ExperimentConfig, CONFIG_VERSION};
use crate::error::CliError;
use crate::output::Format;

#[derive(Debug, Parser)]
#[command(
    name = "contrastlab",
    version,
    about = "Contrastive-learning experiments on synthetic data"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Sub,

    /// Experiment config (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Output directory; overrides the config's `output`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    /// Master seed; overrides the config's `seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    #[arg(long, global = true, value_enum, default_value = "json")]
    pub format: Format,
}

#[derive(Debug, Subcommand)]
pub enum Sub {
    /// Write the configured dataset to `dataset.txt`.
    Gen,
    /// Train the encoder; writes a checkpoint and `history.csv`.
    Train,
    /// Fit linear probes on the configured domains.
    Probe {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Bound checks and estimators.
    Diagnose {
        #[arg(value_enum)]
        which: Diagnostic,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Toy construction: alignment level.
        #[arg(long)]
        epsilon: Option<f64>,
        /// Toy construction: sample count.
        #[arg(long)]
        n: Option<usize>,
        /// View counts for view-scaling, comma separated.
        #[arg(long, value_delimiter = ',')]
        m: Option<Vec<usize>>,
        #[arg(long)]
        repeats: Option<usize>,
        /// Diameter for the (σ, δ) estimate.
        #[arg(long)]
        delta: Option<f64>,
    },
    /// Train and probe every configured method over several seeds.
    Compare,
}

/// Loads the config, folds command-line overrides into it and runs.
pub fn run_from_args(cli: Cli) -> Result<i32, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => {
            ExperimentConfig::from_json(&format!(r#"{{"version": {CONFIG_VERSION}, "seed": 0}}"#))?
        }
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let (command, checkpoint) = match cli.command {
        Sub::Gen => (Command::Gen, None),
        Sub::Train => (Command::Train, None),
        Sub::Probe { checkpoint } => (Command::Probe, checkpoint),
        Sub::Diagnose {
            which,
            checkpoint,
            epsilon,
            n,
            m,
            repeats,
            delta,
        } => {
            let plan = &mut cfg.eval;
            if let Some(e) = epsilon {
                plan.toy.epsilon = e;
            }
            if let Some(n) = n {
                plan.toy.n = n;
            }
            if let Some(m) = m {
                plan.view_scaling.m = m;
            }
            if let Some(r) = repeats {
                plan.view_scaling.repeats = r;
            }
            if let Some(d) = delta {
                plan.sigma.delta = d;
            }
            (Command::Diagnose(which), checkpoint)
        }
        Sub::Compare => (Command::Compare, None),
    };
    cfg.validate()?;
    let opts = RunOptions {
        out: cli.out.unwrap_or_else(|| default_out(&cfg)),
        format: cli.format,
        checkpoint,
    };
    run(&command, &cfg, &opts)
}
