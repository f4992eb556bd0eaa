//! `train-emotion`: multi-task fine-tuning of the emotion encoder with
//! joint 7-way emotion / 3-way sentiment heads and the learned loss
//! balance. Early stopping and checkpoint selection on validation emotion
//! macro-F1; UA/WA reported for both tasks.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, Context, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use valtime_core::emotion::{
    inverse_frequency_weights, mtl_forward, mtl_loss, MtlModel, N_EMOTIONS, N_SENTIMENTS,
};
use valtime_core::encoder::EncoderConfig;
use valtime_core::metrics::{classification_report, MetricsReport};
use valtime_core::params::ParamSet;
use valtime_core::tape::{Phase, Tape};
use valtime_core::train::{lr_schedule, train_loop, AdamW, TrainConfig, TrainLoopError, TrainTask};

use crate::batch::accumulate_chunk;
use crate::checkpoint::{save_checkpoint, Checkpoint};
use crate::config::RunConfig;
use crate::corpus::{CorpusData, LoadedUtterance};
use crate::drivers::{argmax, stream, tag, BEST_CHECKPOINT, CHECKPOINT_DIR};
use crate::runlog::{LogRecord, RunLogger};

#[derive(Debug, Serialize, Deserialize)]
pub struct MtlCkptMeta {
    pub stage: String,
    pub encoder: EncoderConfig,
    pub emotion_class_weights: Vec<f64>,
    pub best_val_macro_f1: f64,
    pub best_step: u64,
    pub seed: u64,
}

pub struct MtlOutcome {
    pub ckpt_path: PathBuf,
    pub best_val_macro_f1: f64,
    pub best_step: u64,
    pub val_emotion: MetricsReport,
    pub val_sentiment: MetricsReport,
    pub wall_s: f64,
}

/// Emotion and sentiment predictions for a set of utterances (eval phase).
pub fn mtl_predict(
    ps: &ParamSet,
    model: &MtlModel,
    cfg: &RunConfig,
    utts: &[LoadedUtterance],
) -> Result<(Vec<usize>, Vec<usize>)> {
    let preds: Vec<Result<(usize, usize)>> = utts
        .par_iter()
        .enumerate()
        .map(|(i, u)| {
            let mut tape = Tape::new(Phase::Eval);
            let mut fr = stream(cfg.train.seed, &[tag::EVAL, i as u64]);
            let fwd = mtl_forward(&mut tape, ps, model, &cfg.encoder, &u.samples, u.samples.len(), &mut fr)?;
            Ok((
                argmax(tape.values(fwd.emotion_logits)),
                argmax(tape.values(fwd.sentiment_logits)),
            ))
        })
        .collect();
    let mut emotion = Vec::with_capacity(utts.len());
    let mut sentiment = Vec::with_capacity(utts.len());
    for p in preds {
        let (e, s) = p?;
        emotion.push(e);
        sentiment.push(s);
    }
    Ok((emotion, sentiment))
}

/// Validation reports for both tasks.
pub fn mtl_validation_reports(
    ps: &ParamSet,
    model: &MtlModel,
    cfg: &RunConfig,
    utts: &[LoadedUtterance],
) -> Result<(MetricsReport, MetricsReport)> {
    let (e_pred, s_pred) = mtl_predict(ps, model, cfg, utts)?;
    let e_true: Vec<usize> = utts.iter().map(|u| u.entry.emotion_id).collect();
    let s_true: Vec<usize> = utts.iter().map(|u| u.entry.sentiment_id).collect();
    Ok((
        classification_report(&e_true, &e_pred, N_EMOTIONS)?,
        classification_report(&s_true, &s_pred, N_SENTIMENTS)?,
    ))
}

struct MtlTask<'a> {
    ps: ParamSet,
    opt: AdamW,
    model: MtlModel,
    cfg: &'a RunConfig,
    train_cfg: TrainConfig,
    corpus: &'a CorpusData,
    weights: Vec<f64>,
    log: &'a mut RunLogger,
    best_values: Option<Vec<Vec<f64>>>,
}

impl TrainTask for MtlTask<'_> {
    type Error = anyhow::Error;

    fn run_chunk(&mut self, chunk: &[usize], _step: u64, epoch: usize) -> Result<f64> {
        let model = &self.model;
        let cfg = self.cfg;
        let seed = self.train_cfg.seed;
        let corpus = self.corpus;
        let weights = &self.weights;
        accumulate_chunk(&mut self.ps, chunk, |i, ps| {
            let u = &corpus.train[i];
            let mut tape = Tape::new(Phase::Train);
            let mut fr = stream(seed, &[tag::MTL_DROPOUT, i as u64, epoch as u64]);
            let fwd = mtl_forward(&mut tape, ps, model, &cfg.encoder, &u.samples, u.samples.len(), &mut fr)?;
            let alpha = tape.param(ps, model.heads.alpha_logit);
            let loss = mtl_loss(
                &mut tape,
                fwd.emotion_logits,
                &[u.entry.emotion_id],
                weights,
                fwd.sentiment_logits,
                &[u.entry.sentiment_id],
                alpha,
            )?;
            tape.backward(loss)?;
            Ok((tape.scalar(loss), tape.param_grads()))
        })
    }

    fn optim_step(&mut self, lr: f64, _step: u64) -> Result<()> {
        self.opt.step(&mut self.ps, lr);
        Ok(())
    }

    fn evaluate(&mut self, step: u64) -> Result<f64> {
        let (emo, sent) = mtl_validation_reports(&self.ps, &self.model, self.cfg, &self.corpus.val)?;
        let alpha_logit = self.ps.get(self.model.heads.alpha_logit).values[0];
        let alpha = 1.0 / (1.0 + (-alpha_logit).exp());
        let mut metrics = BTreeMap::new();
        metrics.insert("emotion_macro_f1".into(), emo.macro_f1);
        metrics.insert("emotion_ua".into(), emo.ua);
        metrics.insert("emotion_wa".into(), emo.wa);
        metrics.insert("sentiment_macro_f1".into(), sent.macro_f1);
        metrics.insert("sentiment_ua".into(), sent.ua);
        metrics.insert("sentiment_wa".into(), sent.wa);
        metrics.insert("alpha".into(), alpha);
        self.log.write(&LogRecord::Eval {
            step,
            lr: lr_schedule(step.max(1), &self.train_cfg),
            metrics,
        })?;
        Ok(emo.macro_f1)
    }

    fn snapshot(&mut self, _step: u64, _metric: f64) -> Result<()> {
        self.best_values = Some(self.ps.snapshot_values());
        Ok(())
    }
}

pub fn train_emotion(corpus: &CorpusData, cfg: &RunConfig, run_dir: &Path) -> Result<MtlOutcome> {
    let start = Instant::now();
    cfg.echo_into(run_dir)?;
    let mut log = RunLogger::create(run_dir)?;
    let train_cfg = cfg.stage_train(&cfg.emotion.schedule);

    let mut counts = vec![0u64; N_EMOTIONS];
    for u in &corpus.train {
        counts[u.entry.emotion_id] += 1;
    }
    let weights = inverse_frequency_weights(&counts)?;

    let mut ps = ParamSet::new();
    let mut init_rng = stream(train_cfg.seed, &[tag::MTL_INIT]);
    let model = MtlModel::init(&mut ps, &cfg.encoder, &mut init_rng)?;
    log.write(&LogRecord::RunStart {
        stage: "train-emotion".into(),
        seed: train_cfg.seed,
        n_train: corpus.train.len(),
        n_val: corpus.val.len(),
        trainable_params: ps.trainable_names(),
        n_trainable_values: ps.n_trainable_values(),
    })?;

    let opt = AdamW::new(&train_cfg, &ps);
    let mut task = MtlTask {
        ps,
        opt,
        model,
        cfg,
        train_cfg: train_cfg.clone(),
        corpus,
        weights: weights.clone(),
        log: &mut log,
        best_values: None,
    };
    let outcome = train_loop(&train_cfg, corpus.train.len(), &mut task).map_err(|e| match e {
        TrainLoopError::Task(e) => e,
        TrainLoopError::EmptySplit => anyhow!("empty training split"),
        TrainLoopError::Config(e) => anyhow!("{e}"),
    })?;

    let best = task.best_values.take().context("no evaluation happened")?;
    task.ps.restore_values(&best);
    let (val_emotion, val_sentiment) = mtl_validation_reports(&task.ps, &task.model, cfg, &corpus.val)?;

    let ckpt_dir = run_dir.join(CHECKPOINT_DIR);
    std::fs::create_dir_all(&ckpt_dir)?;
    let ckpt_path = ckpt_dir.join(BEST_CHECKPOINT);
    let meta = MtlCkptMeta {
        stage: "train-emotion".into(),
        encoder: cfg.encoder.clone(),
        emotion_class_weights: weights,
        best_val_macro_f1: outcome.best_metric,
        best_step: outcome.best_step,
        seed: train_cfg.seed,
    };
    save_checkpoint(&ckpt_path, &Checkpoint::from_params(&task.ps, &meta)?)?;

    let wall_s = start.elapsed().as_secs_f64();
    task.log.write(&LogRecord::Summary {
        best_step: outcome.best_step,
        best_metric: outcome.best_metric,
        metric_name: "emotion_macro_f1".into(),
        stop_reason: format!("{:?}", outcome.stop),
        optimizer_steps: outcome.optimizer_steps,
        wall_s,
    })?;

    Ok(MtlOutcome {
        ckpt_path,
        best_val_macro_f1: outcome.best_metric,
        best_step: outcome.best_step,
        val_emotion,
        val_sentiment,
        wall_s,
    })
}

/// Rebuild an MTL model and parameter store from a checkpoint.
pub fn load_mtl_checkpoint(path: &Path) -> Result<(ParamSet, MtlModel, MtlCkptMeta)> {
    let ckpt = crate::checkpoint::load_checkpoint(path)?;
    let meta: MtlCkptMeta = ckpt.meta()?;
    let mut ps = ParamSet::new();
    let mut init_rng = stream(meta.seed, &[tag::MTL_INIT]);
    let model = MtlModel::init(&mut ps, &meta.encoder, &mut init_rng)?;
    let loaded = ckpt.load_into(&mut ps, |n| Some(n.to_string()))?;
    anyhow::ensure!(loaded == ps.len(), "checkpoint restored {loaded} of {} params", ps.len());
    Ok((ps, model, meta))
}
