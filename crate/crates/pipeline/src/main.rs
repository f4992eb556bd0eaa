//! `valtime`: speech-only validation-timing detection, end to end.

use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use valtime::config::RunConfig;
use valtime::corpus::{generate_corpus, load_corpus};
use valtime::drivers::ablate::{ablate, AblateGrid};
use valtime::drivers::emotion::train_emotion;
use valtime::drivers::evaluate::{evaluate_checkpoint, write_evaluation};
use valtime::drivers::pretrain::pretrain;
use valtime::drivers::timing::train_timing;
use valtime::drivers::units::fit_units;
use valtime::checkpoint::load_kmeans;
use valtime::manifest::Split;
use valtime_core::fusion::{BranchPolicy, FusionStrategy};
use valtime_core::metrics::timing_row;

#[derive(Parser)]
#[command(name = "valtime", version, about = "Speech-only validation-timing detection pipeline")]
struct Cli {
    /// TOML run configuration; flags override file values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Random seed override for every stage.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct OutArg {
    /// Output directory of this run.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic emotional-speech corpus (audio + manifest).
    GenCorpus {
        #[command(flatten)]
        out: OutArg,
    },
    /// Fit the k-means unit codebook on the training split.
    FitUnits {
        /// Corpus directory (with manifest.jsonl).
        #[arg(long)]
        corpus: PathBuf,
        #[command(flatten)]
        out: OutArg,
    },
    /// Continued pretraining of the paralinguistic encoder (masked units).
    Pretrain {
        #[arg(long)]
        corpus: PathBuf,
        /// Unit codebook produced by fit-units.
        #[arg(long)]
        units: PathBuf,
        #[command(flatten)]
        out: OutArg,
    },
    /// Multi-task emotion/sentiment training of the emotion encoder.
    TrainEmotion {
        #[arg(long)]
        corpus: PathBuf,
        #[command(flatten)]
        out: OutArg,
    },
    /// Train the fused validate/non-validate classifier.
    TrainTiming {
        #[arg(long)]
        corpus: PathBuf,
        /// SSL checkpoint for the paralinguistic branch.
        #[arg(long)]
        para: Option<PathBuf>,
        /// MTL checkpoint for the emotion branch.
        #[arg(long)]
        emo: Option<PathBuf>,
        /// Fusion strategy: concat | attention | gated | mha.
        #[arg(long)]
        strategy: Option<String>,
        /// Paralinguistic-branch policy: freeze | finetune | lora.
        #[arg(long)]
        policy_para: Option<String>,
        /// Emotion-branch policy: freeze | finetune | lora.
        #[arg(long)]
        policy_emo: Option<String>,
        #[command(flatten)]
        out: OutArg,
    },
    /// Evaluate a timing checkpoint on one split.
    Evaluate {
        /// Timing checkpoint path.
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Split to evaluate: train | val | test.
        #[arg(long, default_value = "test")]
        split: String,
        /// Optional directory for the report files.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the fusion-strategy and/or training-policy grids.
    Ablate {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        para: PathBuf,
        #[arg(long)]
        emo: PathBuf,
        /// Grid: fusion | policy | branches | all.
        #[arg(long, default_value = "all")]
        grid: String,
        #[command(flatten)]
        out: OutArg,
    },
}

fn load_cfg(cli_config: &Option<PathBuf>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(cli_config.as_deref())?;
    if let Some(s) = seed {
        cfg.override_seed(s);
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenCorpus { out } => {
            let cfg = load_cfg(&cli.config, cli.seed)?;
            let entries = generate_corpus(&cfg.corpus, &out.out)?;
            let n_validate = entries.iter().filter(|e| e.timing_id == 1).count();
            println!(
                "wrote {} utterances ({} validate / {} non-validate) to {}",
                entries.len(),
                n_validate,
                entries.len() - n_validate,
                out.out.display()
            );
        }
        Command::FitUnits { corpus, out } => {
            let cfg = load_cfg(&cli.config, cli.seed)?;
            let data = load_corpus(&corpus)?;
            std::fs::create_dir_all(&out.out)?;
            let path = out.out.join("units.kmm");
            let outcome = fit_units(&data, &cfg, &path)?;
            println!(
                "fit K={} on {} frames in {} Lloyd iterations, inertia {:.3e}; wrote {}",
                outcome.model.k,
                outcome.n_frames_fit,
                outcome.inertia_history.len(),
                outcome.model.inertia,
                path.display()
            );
        }
        Command::Pretrain { corpus, units, out } => {
            let cfg = load_cfg(&cli.config, cli.seed)?;
            let data = load_corpus(&corpus)?;
            let kmeans = load_kmeans(&units)?;
            let outcome = pretrain(&data, &kmeans, &cfg, &out.out)?;
            println!(
                "pretrain done in {:.1}s: best val loss {:.4} at step {}; checkpoint {}",
                outcome.wall_s,
                outcome.best_val_loss,
                outcome.best_step,
                outcome.ckpt_path.display()
            );
        }
        Command::TrainEmotion { corpus, out } => {
            let cfg = load_cfg(&cli.config, cli.seed)?;
            let data = load_corpus(&corpus)?;
            let outcome = train_emotion(&data, &cfg, &out.out)?;
            println!(
                "train-emotion done in {:.1}s: best val emotion macro-F1 {:.4} at step {}",
                outcome.wall_s, outcome.best_val_macro_f1, outcome.best_step
            );
            println!(
                "val emotion UA/WA: {:.2}/{:.2}  sentiment UA/WA: {:.2}/{:.2}",
                100.0 * outcome.val_emotion.ua,
                100.0 * outcome.val_emotion.wa,
                100.0 * outcome.val_sentiment.ua,
                100.0 * outcome.val_sentiment.wa
            );
        }
        Command::TrainTiming {
            corpus,
            para,
            emo,
            strategy,
            policy_para,
            policy_emo,
            out,
        } => {
            let mut cfg = load_cfg(&cli.config, cli.seed)?;
            if let Some(s) = strategy {
                cfg.timing.strategy = FusionStrategy::from_str(&s)?;
            }
            if let Some(p) = policy_para {
                cfg.timing.policy_para = BranchPolicy::from_str(&p)?;
            }
            if let Some(p) = policy_emo {
                cfg.timing.policy_emo = BranchPolicy::from_str(&p)?;
            }
            let data = load_corpus(&corpus)?;
            let outcome = train_timing(&data, para.as_deref(), emo.as_deref(), &cfg, &out.out)?;
            let row = timing_row(&outcome.test_report);
            println!(
                "train-timing done in {:.1}s: best val macro-F1 {:.4} at step {}",
                outcome.wall_s, outcome.best_val_macro_f1, outcome.best_step
            );
            println!(
                "test: V-Prec {:.2}  V-F1 {:.2}  NV-F1 {:.2}  M-F1 {:.2}",
                row[0], row[1], row[2], row[3]
            );
        }
        Command::Evaluate { ckpt, corpus, split, out } => {
            let split = Split::from_str(&split)?;
            let outcome = evaluate_checkpoint(&ckpt, &corpus, split)?;
            print!("{}", outcome.table);
            if let Some(dir) = out {
                write_evaluation(&dir, split, &outcome)?;
            }
        }
        Command::Ablate {
            corpus,
            para,
            emo,
            grid,
            out,
        } => {
            let cfg = load_cfg(&cli.config, cli.seed)?;
            let grid = AblateGrid::from_str(&grid)?;
            let data = load_corpus(&corpus)?;
            ablate(&data, &para, &emo, &cfg, grid, &out.out)
                .context("ablation grid failed")?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // Single-line, machine-parsable failure report.
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
