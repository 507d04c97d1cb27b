//! `pmfa`: featurize, train, embed, score, sweep and count parameters.

mod commands;
mod features;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pmfa::config::ExperimentConfig;

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_DATA: u8 = 2;
pub const EXIT_DIVERGENCE: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "pmfa", version, about = "Speaker embeddings from multi-layer encoder features")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Configuration shared by commands that need one.
#[derive(Args, Debug, Clone)]
pub struct ConfigArgs {
    /// Experiment config file.
    #[arg(short, long)]
    pub config: Option<PathBuf>,
    /// `KEY=VALUE` override applied after the file; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> pmfa::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        cfg.apply_overrides(&self.overrides)?;
        if let Some(s) = self.seed {
            cfg.schedule.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic corpus: wavs, manifests, trial lists, noise pool.
    Synth(commands::SynthArgs),
    /// Cache log-mel features for every manifest entry.
    Featurize(commands::FeaturizeArgs),
    /// Two-stage training with per-epoch checkpoints and a metrics CSV.
    Train(commands::TrainArgs),
    /// Extract one embedding per manifest utterance.
    Embed(commands::EmbedArgs),
    /// Score a trial list and report EER and minDCF.
    Eval(commands::EvalArgs),
    /// Train and score one model per layer range.
    Sweep(commands::SweepArgs),
    /// Parameter counts for full fine-tuning, head-only and LoRA modes.
    CountParams(commands::CountArgs),
    /// Fold adapters into the base weights of a checkpoint.
    MergeLora(commands::MergeArgs),
}

/// Failure with the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl From<pmfa::Error> for Failure {
    fn from(e: pmfa::Error) -> Self {
        use pmfa::Error as E;
        let code = match e {
            E::Divergence { .. } | E::Numeric(_) => EXIT_DIVERGENCE,
            E::Config(_) | E::Range { .. } | E::Rank { .. } => EXIT_USAGE,
            _ => EXIT_DATA,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_DATA,
            message: message.into(),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Featurize(a) => commands::featurize(a),
        Command::Train(a) => commands::train(a),
        Command::Embed(a) => commands::embed(a),
        Command::Eval(a) => commands::eval(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::CountParams(a) => commands::count_params(a),
        Command::MergeLora(a) => commands::merge_lora(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
