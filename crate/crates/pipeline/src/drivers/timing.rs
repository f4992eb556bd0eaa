//! `train-timing`: fuse the pretrained paralinguistic encoder and the
//! emotion encoder into the binary validate/non-validate classifier and
//! fine-tune under a per-branch freeze/finetune/LoRA policy. Training
//! optionally downsamples the majority class; selection is on validation
//! macro-F1.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use valtime_core::encoder::EncoderConfig;
use valtime_core::fusion::{
    apply_freeze_policy, attach_lora, BranchPolicy, BranchSelect, FusionConfig, TimingModel,
};
use valtime_core::metrics::{classification_report, timing_row, MetricsReport};
use valtime_core::params::ParamSet;
use valtime_core::tape::{Phase, Tape};
use valtime_core::train::{
    balance_downsample, lr_schedule, train_loop, AdamW, TrainConfig, TrainLoopError, TrainTask,
};

use crate::batch::accumulate_chunk;
use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::config::{RunConfig, TimingSection};
use crate::corpus::{CorpusData, LoadedUtterance};
use crate::drivers::{argmax, stream, tag, BEST_CHECKPOINT, CHECKPOINT_DIR};
use crate::runlog::{LogRecord, RunLogger};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TimingCkptMeta {
    pub stage: String,
    pub encoder: EncoderConfig,
    pub fusion: FusionConfig,
    pub branches: BranchSelect,
    pub policy_para: BranchPolicy,
    pub policy_emo: BranchPolicy,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub best_val_metric: f64,
    pub best_step: u64,
    pub seed: u64,
}

pub struct TimingOutcome {
    pub ckpt_path: PathBuf,
    pub best_step: u64,
    pub best_val_macro_f1: f64,
    pub val_report: MetricsReport,
    pub test_report: MetricsReport,
    pub trainable_params: Vec<String>,
    pub train_indices_used: usize,
    pub wall_s: f64,
}

/// Build the timing model skeleton (fresh parameters, LoRA adapters per
/// policy) exactly as training does, so checkpoints can be reloaded by name.
pub fn build_timing_model(
    enc_cfg: &EncoderConfig,
    fusion_cfg: &FusionConfig,
    section: &TimingSection,
    seed: u64,
) -> Result<(ParamSet, TimingModel)> {
    let mut fusion_cfg = fusion_cfg.clone();
    fusion_cfg.strategy = section.strategy;
    let mut ps = ParamSet::new();
    let mut init_rng = stream(seed, &[tag::TIMING_INIT]);
    let mut model = TimingModel::init(&mut ps, enc_cfg, &fusion_cfg, section.branches, &mut init_rng)?;
    let mut lora_rng = stream(seed, &[tag::TIMING_LORA]);
    if section.policy_para == BranchPolicy::Lora {
        if let Some(b) = model.para.as_mut() {
            b.lora = Some(attach_lora(&mut ps, "para.", enc_cfg, section.lora_rank, section.lora_alpha, &mut lora_rng)?);
        }
    }
    if section.policy_emo == BranchPolicy::Lora {
        if let Some(b) = model.emo.as_mut() {
            b.lora = Some(attach_lora(&mut ps, "emo.", enc_cfg, section.lora_rank, section.lora_alpha, &mut lora_rng)?);
        }
    }
    Ok((ps, model))
}

/// Copy stage-checkpoint encoder weights into the branch slots.
pub fn load_branch_checkpoints(
    ps: &mut ParamSet,
    model: &TimingModel,
    para_ckpt: Option<&Path>,
    emo_ckpt: Option<&Path>,
) -> Result<()> {
    if model.para.is_some() {
        let path = para_ckpt.context("this configuration needs --para <ssl checkpoint>")?;
        let ckpt = load_checkpoint(path)?;
        let n = ckpt.load_into(ps, |name| {
            name.strip_prefix("enc.").map(|rest| format!("para.{rest}"))
        })?;
        anyhow::ensure!(n > 0, "{}: no encoder entries found", path.display());
    }
    if model.emo.is_some() {
        let path = emo_ckpt.context("this configuration needs --emo <mtl checkpoint>")?;
        let ckpt = load_checkpoint(path)?;
        let n = ckpt.load_into(ps, |name| {
            name.strip_prefix("enc.").map(|rest| format!("emo.{rest}"))
        })?;
        anyhow::ensure!(n > 0, "{}: no encoder entries found", path.display());
    }
    Ok(())
}

/// Timing predictions (eval phase) for a set of utterances.
pub fn timing_predict(
    ps: &ParamSet,
    model: &TimingModel,
    enc_cfg: &EncoderConfig,
    fusion_cfg: &FusionConfig,
    seed: u64,
    utts: &[LoadedUtterance],
) -> Result<Vec<usize>> {
    let preds: Vec<Result<usize>> = utts
        .par_iter()
        .enumerate()
        .map(|(i, u)| {
            let mut tape = Tape::new(Phase::Eval);
            let mut fr = stream(seed, &[tag::EVAL, i as u64]);
            let logits = model.forward(&mut tape, ps, enc_cfg, fusion_cfg, &u.samples, u.samples.len(), &mut fr)?;
            Ok(argmax(tape.values(logits)))
        })
        .collect();
    preds.into_iter().collect()
}

pub fn timing_report(
    ps: &ParamSet,
    model: &TimingModel,
    enc_cfg: &EncoderConfig,
    fusion_cfg: &FusionConfig,
    seed: u64,
    utts: &[LoadedUtterance],
) -> Result<MetricsReport> {
    let preds = timing_predict(ps, model, enc_cfg, fusion_cfg, seed, utts)?;
    let truth: Vec<usize> = utts.iter().map(|u| u.entry.timing_id).collect();
    Ok(classification_report(&truth, &preds, 2)?)
}

struct TimingTask<'a> {
    ps: ParamSet,
    opt: AdamW,
    model: TimingModel,
    enc_cfg: &'a EncoderConfig,
    fusion_cfg: FusionConfig,
    train_cfg: TrainConfig,
    corpus: &'a CorpusData,
    /// Indices into `corpus.train` actually used (after balancing).
    train_indices: Vec<usize>,
    log: &'a mut RunLogger,
    best_values: Option<Vec<Vec<f64>>>,
}

impl TrainTask for TimingTask<'_> {
    type Error = anyhow::Error;

    fn run_chunk(&mut self, chunk: &[usize], _step: u64, epoch: usize) -> Result<f64> {
        let model = &self.model;
        let enc_cfg = self.enc_cfg;
        let fusion_cfg = &self.fusion_cfg;
        let seed = self.train_cfg.seed;
        let corpus = self.corpus;
        let train_indices = &self.train_indices;
        accumulate_chunk(&mut self.ps, chunk, |i, ps| {
            let u = &corpus.train[train_indices[i]];
            let mut tape = Tape::new(Phase::Train);
            let mut fr = stream(seed, &[tag::TIMING_DROPOUT, i as u64, epoch as u64]);
            let logits = model.forward(&mut tape, ps, enc_cfg, fusion_cfg, &u.samples, u.samples.len(), &mut fr)?;
            let loss = tape.cross_entropy(logits, &[u.entry.timing_id], None, None)?;
            tape.backward(loss)?;
            Ok((tape.scalar(loss), tape.param_grads()))
        })
    }

    fn optim_step(&mut self, lr: f64, _step: u64) -> Result<()> {
        self.opt.step(&mut self.ps, lr);
        Ok(())
    }

    fn evaluate(&mut self, step: u64) -> Result<f64> {
        let report = timing_report(
            &self.ps,
            &self.model,
            self.enc_cfg,
            &self.fusion_cfg,
            self.train_cfg.seed,
            &self.corpus.val,
        )?;
        let row = timing_row(&report);
        let mut metrics = BTreeMap::new();
        metrics.insert("v_precision".into(), row[0] / 100.0);
        metrics.insert("v_f1".into(), row[1] / 100.0);
        metrics.insert("nv_f1".into(), row[2] / 100.0);
        metrics.insert("macro_f1".into(), row[3] / 100.0);
        self.log.write(&LogRecord::Eval {
            step,
            lr: lr_schedule(step.max(1), &self.train_cfg),
            metrics,
        })?;
        Ok(report.macro_f1)
    }

    fn snapshot(&mut self, _step: u64, _metric: f64) -> Result<()> {
        self.best_values = Some(self.ps.snapshot_values());
        Ok(())
    }
}

pub fn train_timing(
    corpus: &CorpusData,
    para_ckpt: Option<&Path>,
    emo_ckpt: Option<&Path>,
    cfg: &RunConfig,
    run_dir: &Path,
) -> Result<TimingOutcome> {
    let start = Instant::now();
    cfg.echo_into(run_dir)?;
    let mut log = RunLogger::create(run_dir)?;
    let section = &cfg.timing;
    let train_cfg = cfg.stage_train(&section.schedule);

    let (mut ps, model) = build_timing_model(&cfg.encoder, &cfg.fusion, section, train_cfg.seed)?;
    load_branch_checkpoints(&mut ps, &model, para_ckpt, emo_ckpt)?;
    let trainable = apply_freeze_policy(&mut ps, section.policy_para, section.policy_emo);

    // Optional class balancing of the training split.
    let labels: Vec<usize> = corpus.train.iter().map(|u| u.entry.timing_id).collect();
    let train_indices: Vec<usize> = if section.balance_majority_to > 0 {
        let target = section.balance_majority_to;
        if target > labels.len() {
            bail!("balance target {target} exceeds the training split");
        }
        balance_downsample(&labels, target, train_cfg.seed)?
    } else {
        (0..labels.len()).collect()
    };

    log.write(&LogRecord::RunStart {
        stage: "train-timing".into(),
        seed: train_cfg.seed,
        n_train: train_indices.len(),
        n_val: corpus.val.len(),
        trainable_params: trainable.clone(),
        n_trainable_values: ps.n_trainable_values(),
    })?;

    let opt = AdamW::new(&train_cfg, &ps);
    let mut fusion_cfg = cfg.fusion.clone();
    fusion_cfg.strategy = section.strategy;
    let n_train = train_indices.len();
    let mut task = TimingTask {
        ps,
        opt,
        model,
        enc_cfg: &cfg.encoder,
        fusion_cfg: fusion_cfg.clone(),
        train_cfg: train_cfg.clone(),
        corpus,
        train_indices,
        log: &mut log,
        best_values: None,
    };
    let outcome = train_loop(&train_cfg, n_train, &mut task).map_err(|e| match e {
        TrainLoopError::Task(e) => e,
        TrainLoopError::EmptySplit => anyhow!("empty training split"),
        TrainLoopError::Config(e) => anyhow!("{e}"),
    })?;

    let best = task.best_values.take().context("no evaluation happened")?;
    task.ps.restore_values(&best);

    let val_report = timing_report(&task.ps, &task.model, &cfg.encoder, &fusion_cfg, train_cfg.seed, &corpus.val)?;
    let test_report = timing_report(&task.ps, &task.model, &cfg.encoder, &fusion_cfg, train_cfg.seed, &corpus.test)?;

    let ckpt_dir = run_dir.join(CHECKPOINT_DIR);
    std::fs::create_dir_all(&ckpt_dir)?;
    let ckpt_path = ckpt_dir.join(BEST_CHECKPOINT);
    let meta = TimingCkptMeta {
        stage: "train-timing".into(),
        encoder: cfg.encoder.clone(),
        fusion: fusion_cfg.clone(),
        branches: section.branches,
        policy_para: section.policy_para,
        policy_emo: section.policy_emo,
        lora_rank: section.lora_rank,
        lora_alpha: section.lora_alpha,
        best_val_metric: outcome.best_metric,
        best_step: outcome.best_step,
        seed: train_cfg.seed,
    };
    save_checkpoint(&ckpt_path, &Checkpoint::from_params(&task.ps, &meta)?)?;

    // Final report files: machine-readable and the 4-column table.
    let table = valtime_core::metrics::format_timing_table(&[
        ("val".to_string(), val_report.clone()),
        ("test".to_string(), test_report.clone()),
    ]);
    std::fs::write(run_dir.join("report.txt"), &table)?;
    std::fs::write(
        run_dir.join("report.json"),
        serde_json::to_string_pretty(&serde_json::json!({
            "val": val_report,
            "test": test_report,
            "best_step": outcome.best_step,
            "best_val_macro_f1": outcome.best_metric,
        }))?,
    )?;

    let wall_s = start.elapsed().as_secs_f64();
    task.log.write(&LogRecord::Summary {
        best_step: outcome.best_step,
        best_metric: outcome.best_metric,
        metric_name: "macro_f1".into(),
        stop_reason: format!("{:?}", outcome.stop),
        optimizer_steps: outcome.optimizer_steps,
        wall_s,
    })?;

    Ok(TimingOutcome {
        ckpt_path,
        best_step: outcome.best_step,
        best_val_macro_f1: outcome.best_metric,
        val_report,
        test_report,
        trainable_params: trainable,
        train_indices_used: n_train,
        wall_s,
    })
}

/// Rebuild a timing model and parameters from a full checkpoint.
pub fn load_timing_checkpoint(path: &Path) -> Result<(ParamSet, TimingModel, TimingCkptMeta)> {
    let ckpt = load_checkpoint(path)?;
    let meta: TimingCkptMeta = ckpt.meta()?;
    let section = TimingSection {
        strategy: meta.fusion.strategy,
        policy_para: meta.policy_para,
        policy_emo: meta.policy_emo,
        branches: meta.branches,
        lora_rank: meta.lora_rank,
        lora_alpha: meta.lora_alpha,
        ..TimingSection::default()
    };
    let (mut ps, model) = build_timing_model(&meta.encoder, &meta.fusion, &section, meta.seed)?;
    let loaded = ckpt.load_into(&mut ps, |n| Some(n.to_string()))?;
    anyhow::ensure!(loaded == ps.len(), "checkpoint restored {loaded} of {} params", ps.len());
    Ok((ps, model, meta))
}
