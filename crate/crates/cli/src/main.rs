use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use esd_cli::commands::{self, Overrides};
use esd_cli::config::ExperimentConfig;
use esd_core::denoiser::ConditionId;
use esd_core::erasure::EraseMode;

#[derive(Parser)]
#[command(
    name = "esd",
    version,
    about = "Concept erasure experiments on toy diffusion models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Root directory for run outputs; replaces `out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Global seed; replaces `seed`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EraseFlags {
    #[arg(long)]
    concept: Option<u32>,
    /// esd-x, esd-u or custom:<GROUP,...>.
    #[arg(long)]
    mode: Option<EraseMode>,
    #[arg(long)]
    eta: Option<f32>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a base model.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Erase a concept from a checkpoint into a new checkpoint.
    Erase {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        erase: EraseFlags,
    },
    /// Draw samples for one prompt.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        /// Label index or "null".
        #[arg(long, default_value = "null")]
        prompt: ConditionId,
    },
    /// Compare an edited checkpoint against its base.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Edited checkpoint.
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        base: PathBuf,
        /// Concept marked as erased in the report.
        #[arg(long)]
        concept: Option<u32>,
    },
    /// Erase at several η values and tabulate the tradeoff.
    SweepEta {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        /// Comma-separated η values; replaces `sweep.etas`.
        #[arg(long, value_delimiter = ',')]
        eta: Option<Vec<f32>>,
        #[arg(long)]
        concept: Option<u32>,
        #[arg(long)]
        mode: Option<EraseMode>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Residual field of a concept on a grid.
    ResidualField {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        concept: Option<u32>,
        #[arg(long)]
        t: Option<usize>,
    },
    /// Sample under an inference-time suppression baseline.
    BaselineSample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "null")]
        prompt: ConditionId,
        /// Concept to suppress; replaces `baseline.suppress`.
        #[arg(long)]
        concept: Option<u32>,
    },
}

fn config(common: &Common, overrides: Overrides) -> Result<ExperimentConfig> {
    let cfg = ExperimentConfig::load(&common.config)?;
    Overrides {
        seed: common.seed,
        out: common.out.clone(),
        ..overrides
    }
    .apply(cfg)
}

fn print_paths(paths: &[PathBuf]) {
    for p in paths {
        println!("{}", p.display());
    }
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train { common } => {
            let cfg = config(&common, Overrides::default())?;
            print_paths(&[commands::run_train(cfg)?]);
        }
        Command::Erase {
            common,
            ckpt,
            erase,
        } => {
            let overrides = Overrides {
                concept: erase.concept,
                mode: erase.mode,
                eta: erase.eta,
                steps: erase.steps,
                lr: erase.lr,
                ..Overrides::default()
            };
            let cfg = config(&common, overrides)?;
            print_paths(&[commands::run_erase(cfg, &ckpt)?]);
        }
        Command::Sample {
            common,
            ckpt,
            prompt,
        } => {
            let cfg = config(&common, Overrides::default())?;
            print_paths(&commands::run_sample(cfg, &ckpt, prompt)?);
        }
        Command::Eval {
            common,
            ckpt,
            base,
            concept,
        } => {
            let cfg = config(&common, Overrides::default())?;
            print_paths(&commands::run_eval(cfg, &base, &ckpt, concept)?);
        }
        Command::SweepEta {
            common,
            ckpt,
            eta,
            concept,
            mode,
            steps,
            lr,
        } => {
            let overrides = Overrides {
                concept,
                mode,
                steps,
                lr,
                ..Overrides::default()
            };
            let mut cfg = ExperimentConfig::load(&common.config)?;
            if let Some(etas) = eta {
                cfg.sweep.etas = etas;
            }
            let cfg = Overrides {
                seed: common.seed,
                out: common.out.clone(),
                ..overrides
            }
            .apply(cfg)?;
            print_paths(&[commands::run_sweep(cfg, &ckpt)?]);
        }
        Command::ResidualField {
            common,
            ckpt,
            concept,
            t,
        } => {
            let mut cfg = config(&common, Overrides::default())?;
            cfg.residual.concept = concept.unwrap_or(cfg.residual.concept);
            cfg.residual.t = t.unwrap_or(cfg.residual.t);
            cfg.validate()?;
            print_paths(&commands::run_residual(cfg, &ckpt)?);
        }
        Command::BaselineSample {
            common,
            ckpt,
            prompt,
            concept,
        } => {
            let mut cfg = config(&common, Overrides::default())?;
            cfg.baseline.suppress = concept.unwrap_or(cfg.baseline.suppress);
            cfg.validate()?;
            print_paths(&commands::run_baseline_sample(cfg, &ckpt, prompt)?);
        }
    }
    Ok(())
}
