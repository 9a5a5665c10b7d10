use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{ensure, Context, Result};
use clap::{Parser, Subcommand};
use thrnn::checkpoint::Checkpoint;
use thrnn::commands::{self, Baseline};
use thrnn::config::{parse_alphas, Profile, RunConfig, ALPHA_SWEEP};
use thrnn::ingest::Dataset;

#[derive(Parser)]
#[command(name = "thrnn", version, about = "Next-item and return-time prediction with a hierarchical GRU and a point process")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sessionize and split a raw log (or the configured synthetic corpus).
    Preprocess {
        #[arg(long, value_enum)]
        dataset: Dataset,
        /// Raw log; not used for synthetic corpora.
        #[arg(long, env = "THRNN_INPUT")]
        input: Option<PathBuf>,
        #[arg(long, env = "THRNN_SPLIT")]
        out: PathBuf,
        #[arg(long, env = "THRNN_CONFIG")]
        config: Option<PathBuf>,
    },
    /// Generate the synthetic corpus described by the config's `[synth]` table.
    Synth {
        #[arg(long, env = "THRNN_SPLIT")]
        out: PathBuf,
        #[arg(long, env = "THRNN_CONFIG")]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train and write a checkpoint; training log lines go to stdout.
    Train {
        #[arg(long, env = "THRNN_SPLIT")]
        split: PathBuf,
        #[arg(long, env = "THRNN_CHECKPOINT")]
        out: PathBuf,
        #[arg(long, env = "THRNN_CONFIG")]
        config: Option<PathBuf>,
        /// Continue this checkpoint instead of starting fresh.
        #[arg(long, conflicts_with_all = ["alpha_exp", "alpha_sweep"])]
        resume: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Comma-separated exponents; one checkpoint per value.
        #[arg(long)]
        alpha_exp: Option<String>,
        /// Shorthand for `--alpha-exp 0.3,0.5,0.7,0.9,1.0`.
        #[arg(long, conflicts_with = "alpha_exp")]
        alpha_sweep: bool,
    },
    /// Evaluate checkpoints and baselines on the test sessions.
    Evaluate {
        /// Repeat for several seeds of one model.
        #[arg(long, env = "THRNN_CHECKPOINT", value_delimiter = ',')]
        checkpoint: Vec<PathBuf>,
        #[arg(long, env = "THRNN_SPLIT")]
        split: PathBuf,
        #[arg(long, env = "THRNN_CONFIG")]
        config: Option<PathBuf>,
        #[arg(long, value_enum, value_delimiter = ',')]
        baselines: Vec<Baseline>,
        #[arg(long, env = "THRNN_REPORT")]
        out: PathBuf,
        /// MAE-by-gap CSV for plotting.
        #[arg(long, env = "THRNN_PLOT")]
        plot: Option<PathBuf>,
    },
    /// Top-k next items and the expected return time for one user.
    Predict {
        #[arg(long, env = "THRNN_CHECKPOINT")]
        checkpoint: PathBuf,
        /// JSON history: {"user": id, "sessions": [{"items": [...], "start_time": s, "end_time": e}]}.
        #[arg(long)]
        history: PathBuf,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long, env = "THRNN_CONFIG")]
        config: Option<PathBuf>,
    },
    /// Print a complete configuration for a profile.
    Config {
        #[arg(long, value_enum, default_value = "lastfm")]
        profile: Profile,
    },
}

fn load_config(path: Option<&Path>, fallback: Profile) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::profile(fallback)),
    }
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Preprocess {
            dataset,
            input,
            out,
            config,
        } => {
            let profile = match dataset {
                Dataset::Lastfm => Profile::Lastfm,
                Dataset::Reddit => Profile::Reddit,
                Dataset::Synthetic => Profile::Synthetic,
            };
            let cfg = load_config(config.as_deref(), profile)?;
            print_json(&commands::preprocess(dataset, input.as_deref(), &out, &cfg)?)
        }
        Command::Synth { out, config, seed } => {
            let mut cfg = load_config(config.as_deref(), Profile::Synthetic)?;
            cfg.seed = seed.unwrap_or(cfg.seed);
            print_json(&commands::preprocess(Dataset::Synthetic, None, &out, &cfg)?)
        }
        Command::Train {
            split,
            out,
            config,
            resume,
            epochs,
            seed,
            alpha_exp,
            alpha_sweep,
        } => {
            let mut cfg = load_config(config.as_deref(), Profile::Lastfm)?;
            cfg.epochs = epochs.unwrap_or(cfg.epochs);
            cfg.seed = seed.unwrap_or(cfg.seed);
            cfg.validate()?;
            let mut log = std::io::stdout().lock();
            let done = match resume {
                Some(from) => {
                    let validation = cfg.validate_each_epoch.then_some(&cfg.evaluation);
                    vec![commands::resume(&split, &from, cfg.epochs, validation, &out, &mut log)?]
                }
                None => {
                    let alphas = match (alpha_exp, alpha_sweep) {
                        (Some(list), _) => Some(parse_alphas(&list)?),
                        (None, true) => Some(ALPHA_SWEEP.to_vec()),
                        (None, false) => None,
                    };
                    commands::train(&split, &cfg, &out, alphas.as_deref(), &mut log)?
                }
            };
            drop(log);
            for d in &done {
                eprintln!(
                    "wrote {} (alpha_exp {}, {} epochs, sha256 {})",
                    d.path.display(),
                    d.alpha_exp,
                    d.epochs_done,
                    d.sha256
                );
            }
            Ok(())
        }
        Command::Evaluate {
            checkpoint,
            split,
            config,
            baselines,
            out,
            plot,
        } => {
            ensure!(
                !checkpoint.is_empty() || !baselines.is_empty(),
                "nothing to evaluate: pass --checkpoint and/or --baselines"
            );
            let cfg = load_config(config.as_deref(), Profile::Lastfm)?;
            let lines = commands::evaluate(&checkpoint, &split, &cfg, &baselines, &out, plot.as_deref())?;
            eprintln!("wrote {} records to {}", lines.len(), out.display());
            Ok(())
        }
        Command::Predict {
            checkpoint,
            history,
            k,
            config,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let q = match config {
                Some(p) => RunConfig::load(&p)?.evaluation.quadrature,
                None => Default::default(),
            };
            let h = commands::load_history(&history)?;
            print_json(&commands::predict(&ck, &h, k, &q).context("prediction failed")?)
        }
        Command::Config { profile } => {
            print!("{}", RunConfig::profile(profile).to_toml()?);
            Ok(())
        }
    }
}

fn main() -> std::process::ExitCode {
    match run(Cli::parse()) {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::ExitCode::FAILURE
        }
    }
}
