//! `dynacal`: datagen, surrogate training, identification, preference fine-tuning, plotting.
//!
//! Every command reads one [`config::RunConfig`] and writes only inside its `output_dir`.

pub mod commands;
pub mod config;
pub mod io;
pub mod plot;

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

use commands::{IdentifyInputs, MethodChoice};

#[derive(Debug, Parser)]
#[command(name = "dynacal", version, about = "Identify friction and PD gains of an arm through a learned surrogate")]
pub struct Cli {
    /// JSON run configuration; defaults are used for anything missing.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides `run_seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides `output_dir`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Dotted config override, e.g. `--set surrogate.max_epochs=100`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Grad,
    Sa,
    Both,
}

impl From<MethodArg> for MethodChoice {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Grad => MethodChoice::Grad,
            MethodArg::Sa => MethodChoice::Sa,
            MethodArg::Both => MethodChoice::Both,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate episodes under the hidden parameters and replay them under sampled ones.
    Datagen {
        #[arg(long)]
        n_param_sets: Option<usize>,
    },
    /// Fit the surrogate to a dataset.
    TrainSurrogate {
        /// Defaults to `<out>/dataset.jsonl`.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Estimate (f, p, d) and score it on held-out episodes.
    Identify {
        #[arg(long, value_enum, default_value = "both")]
        method: MethodArg,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        episodes: Option<PathBuf>,
        #[arg(long)]
        param_sets: Option<PathBuf>,
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Fit and score on all episodes.
        #[arg(long)]
        no_holdout: bool,
    },
    /// Preference fine-tuning of a reaching policy under identified parameters.
    Tpo {
        /// Defaults to `<out>/identified.json`.
        #[arg(long)]
        params: Option<PathBuf>,
    },
    /// Render a `step,value` CSV as SVG.
    Plot {
        input: PathBuf,
        /// File name inside the output directory.
        #[arg(long, default_value = "plot.svg")]
        output: String,
        #[arg(long)]
        title: Option<String>,
    },
}

/// Command failure, split by exit code.
#[derive(Debug)]
pub enum Failure {
    /// Bad flags or config: exit 2.
    Usage(anyhow::Error),
    /// Anything after the config was accepted: exit 1.
    Runtime(anyhow::Error),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(e) | Failure::Runtime(e) => write!(f, "{e:#}"),
        }
    }
}

pub fn run(cli: Cli) -> Result<(), Failure> {
    let mut overrides = cli.set.clone();
    if let Command::Datagen { n_param_sets: Some(n) } = &cli.command {
        overrides.push(format!("datagen.n_param_sets={n}"));
    }
    let cfg = config::load(cli.config.as_deref(), &overrides, cli.seed, cli.out.as_deref()).map_err(Failure::Usage)?;
    let result = match cli.command {
        Command::Datagen { .. } => commands::datagen(&cfg),
        Command::TrainSurrogate { dataset } => commands::train_surrogate(&cfg, dataset.as_deref()),
        Command::Identify { method, checkpoint, episodes, param_sets, truth, no_holdout } => {
            let inputs = IdentifyInputs { checkpoint, episodes, param_sets, truth, no_holdout };
            commands::identify(&cfg, method.into(), &inputs).map(|_| ())
        }
        Command::Tpo { params } => commands::tpo(&cfg, params.as_deref()),
        Command::Plot { input, output, title } => commands::plot(&cfg, &input, &output, title.as_deref()),
    };
    result.map_err(Failure::Runtime)
}
