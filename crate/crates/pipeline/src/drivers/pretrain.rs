//! `pretrain`: continued pretraining of the paralinguistic encoder with the
//! span-masked discrete-unit objective. Fixed-epoch protocol (no early
//! stopping), validation each epoch, lowest-validation-loss checkpoint kept.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, Context, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use valtime_core::encoder::{feature_length, EncoderConfig};
use valtime_core::params::ParamSet;
use valtime_core::ssl::{sample_span_masks, ssl_step, SslModel};
use valtime_core::tape::{Phase, Tape};
use valtime_core::train::{lr_schedule, train_loop, AdamW, TrainConfig, TrainTask, TrainLoopError};
use valtime_core::units::{align_units, assign_units, KMeansModel, UnitSequence};

use crate::batch::accumulate_chunk;
use crate::checkpoint::{save_checkpoint, Checkpoint};
use crate::config::RunConfig;
use crate::corpus::{CorpusData, LoadedUtterance};
use crate::drivers::units::corpus_mfcc;
use crate::drivers::{stream, tag, BEST_CHECKPOINT, CHECKPOINT_DIR};
use crate::runlog::{LogRecord, RunLogger};

/// Metadata embedded in SSL checkpoints.
#[derive(Debug, Serialize, Deserialize)]
pub struct SslCkptMeta {
    pub stage: String,
    pub encoder: EncoderConfig,
    pub n_units: usize,
    pub best_val_loss: f64,
    pub best_step: u64,
    pub seed: u64,
}

pub struct PretrainOutcome {
    pub ckpt_path: PathBuf,
    pub best_val_loss: f64,
    pub best_step: u64,
    /// Mean training loss per epoch, for trend checks.
    pub epoch_train_loss: Vec<f64>,
    pub wall_s: f64,
}

/// Discrete units per utterance, aligned to the encoder frame rate.
pub fn utterance_units(
    utts: &[LoadedUtterance],
    kmeans: &KMeansModel,
    cfg: &RunConfig,
) -> Result<Vec<UnitSequence>> {
    let feats = corpus_mfcc(utts, cfg)?;
    let frame_rate = cfg.corpus.sample_rate as f64 / cfg.mfcc.hop as f64;
    feats
        .par_iter()
        .zip(utts)
        .map(|(f, u)| {
            let raw = assign_units(kmeans, f, frame_rate)?;
            let t_enc = feature_length(u.samples.len(), &cfg.encoder.conv_stack)?;
            Ok(align_units(&raw, t_enc)?)
        })
        .collect()
}

/// Mean validation loss under per-utterance fixed masks (stable across
/// epochs, deterministic).
pub fn ssl_validation_loss(
    ps: &ParamSet,
    model: &SslModel,
    cfg: &RunConfig,
    val: &[LoadedUtterance],
    val_units: &[UnitSequence],
) -> Result<f64> {
    let losses: Vec<Result<f64>> = val
        .par_iter()
        .enumerate()
        .map(|(i, u)| {
            let t = feature_length(u.samples.len(), &cfg.encoder.conv_stack)?;
            let mut mask_rng = stream(cfg.train.seed, &[tag::SSL_VAL_MASK, i as u64]);
            let mask = sample_span_masks(t, cfg.mask.prob, cfg.mask.span, &mut mask_rng);
            let mut tape = Tape::new(Phase::Eval);
            let mut fr = stream(cfg.train.seed, &[tag::EVAL, i as u64]);
            let loss = ssl_step(
                &mut tape,
                ps,
                model,
                &cfg.encoder,
                &u.samples,
                u.samples.len(),
                &val_units[i],
                &mask,
                &mut fr,
            )?;
            Ok(tape.scalar(loss))
        })
        .collect();
    let mut total = 0.0;
    for l in &losses {
        total += *l.as_ref().map_err(|e| anyhow!("{e}"))?;
    }
    Ok(total / val.len() as f64)
}

struct SslTask<'a> {
    ps: ParamSet,
    opt: AdamW,
    model: SslModel,
    cfg: &'a RunConfig,
    train_cfg: TrainConfig,
    corpus: &'a CorpusData,
    train_units: &'a [UnitSequence],
    val_units: &'a [UnitSequence],
    log: &'a mut RunLogger,
    best_values: Option<Vec<Vec<f64>>>,
    epoch_loss: Vec<(f64, usize)>,
}

impl TrainTask for SslTask<'_> {
    type Error = anyhow::Error;

    fn run_chunk(&mut self, chunk: &[usize], _step: u64, epoch: usize) -> Result<f64> {
        let model = &self.model;
        let cfg = self.cfg;
        let seed = self.train_cfg.seed;
        let corpus = self.corpus;
        let train_units = self.train_units;
        let loss = accumulate_chunk(&mut self.ps, chunk, |i, ps| {
            let u = &corpus.train[i];
            let t = feature_length(u.samples.len(), &cfg.encoder.conv_stack)?;
            let mut mask_rng = stream(seed, &[tag::SSL_MASK, i as u64, epoch as u64]);
            let mask = sample_span_masks(t, cfg.mask.prob, cfg.mask.span, &mut mask_rng);
            let mut tape = Tape::new(Phase::Train);
            let mut fr = stream(seed, &[tag::SSL_DROPOUT, i as u64, epoch as u64]);
            let loss = ssl_step(
                &mut tape,
                ps,
                model,
                &cfg.encoder,
                &u.samples,
                u.samples.len(),
                &train_units[i],
                &mask,
                &mut fr,
            )?;
            tape.backward(loss)?;
            Ok((tape.scalar(loss), tape.param_grads()))
        })?;
        if self.epoch_loss.len() <= epoch {
            self.epoch_loss.resize(epoch + 1, (0.0, 0));
        }
        self.epoch_loss[epoch].0 += loss;
        self.epoch_loss[epoch].1 += 1;
        Ok(loss)
    }

    fn optim_step(&mut self, lr: f64, _step: u64) -> Result<()> {
        self.opt.step(&mut self.ps, lr);
        Ok(())
    }

    fn evaluate(&mut self, step: u64) -> Result<f64> {
        let val_loss =
            ssl_validation_loss(&self.ps, &self.model, self.cfg, &self.corpus.val, self.val_units)?;
        let mut metrics = BTreeMap::new();
        metrics.insert("val_loss".to_string(), val_loss);
        self.log.write(&LogRecord::Eval {
            step,
            lr: lr_schedule(step.max(1), &self.train_cfg),
            metrics,
        })?;
        // Selection maximizes, so negate the loss.
        Ok(-val_loss)
    }

    fn snapshot(&mut self, _step: u64, _metric: f64) -> Result<()> {
        self.best_values = Some(self.ps.snapshot_values());
        Ok(())
    }
}

pub fn pretrain(
    corpus: &CorpusData,
    kmeans: &KMeansModel,
    cfg: &RunConfig,
    run_dir: &Path,
) -> Result<PretrainOutcome> {
    let start = Instant::now();
    cfg.echo_into(run_dir)?;
    let mut log = RunLogger::create(run_dir)?;
    let train_cfg = cfg.stage_train(&cfg.pretrain.schedule);

    let train_units = utterance_units(&corpus.train, kmeans, cfg)?;
    let val_units = utterance_units(&corpus.val, kmeans, cfg)?;

    let mut ps = ParamSet::new();
    let mut init_rng = stream(train_cfg.seed, &[tag::SSL_INIT]);
    let model = SslModel::init(&mut ps, &cfg.encoder, kmeans.k, &mut init_rng)?;
    log.write(&LogRecord::RunStart {
        stage: "pretrain".into(),
        seed: train_cfg.seed,
        n_train: corpus.train.len(),
        n_val: corpus.val.len(),
        trainable_params: ps.trainable_names(),
        n_trainable_values: ps.n_trainable_values(),
    })?;

    let opt = AdamW::new(&train_cfg, &ps);
    let mut task = SslTask {
        ps,
        opt,
        model,
        cfg,
        train_cfg: train_cfg.clone(),
        corpus,
        train_units: &train_units,
        val_units: &val_units,
        log: &mut log,
        best_values: None,
        epoch_loss: Vec::new(),
    };

    let outcome = train_loop(&train_cfg, corpus.train.len(), &mut task).map_err(|e| match e {
        TrainLoopError::Task(e) => e,
        TrainLoopError::EmptySplit => anyhow!("empty training split"),
        TrainLoopError::Config(e) => anyhow!("{e}"),
    })?;

    let best = task.best_values.take().context("no evaluation happened")?;
    task.ps.restore_values(&best);
    let best_val_loss = -outcome.best_metric;

    let ckpt_dir = run_dir.join(CHECKPOINT_DIR);
    std::fs::create_dir_all(&ckpt_dir)?;
    let ckpt_path = ckpt_dir.join(BEST_CHECKPOINT);
    let meta = SslCkptMeta {
        stage: "pretrain".into(),
        encoder: cfg.encoder.clone(),
        n_units: kmeans.k,
        best_val_loss,
        best_step: outcome.best_step,
        seed: train_cfg.seed,
    };
    save_checkpoint(&ckpt_path, &Checkpoint::from_params(&task.ps, &meta)?)?;

    let wall_s = start.elapsed().as_secs_f64();
    task.log.write(&LogRecord::Summary {
        best_step: outcome.best_step,
        best_metric: best_val_loss,
        metric_name: "val_loss".into(),
        stop_reason: format!("{:?}", outcome.stop),
        optimizer_steps: outcome.optimizer_steps,
        wall_s,
    })?;

    Ok(PretrainOutcome {
        ckpt_path,
        best_val_loss,
        best_step: outcome.best_step,
        epoch_train_loss: task
            .epoch_loss
            .iter()
            .map(|(sum, n)| sum / (*n).max(1) as f64)
            .collect(),
        wall_s,
    })
}

/// Rebuild an SSL model and parameter store from a checkpoint; the metadata
/// carries the recorded best validation loss for round-trip checks.
pub fn load_ssl_checkpoint(path: &Path) -> Result<(ParamSet, SslModel, SslCkptMeta)> {
    let ckpt = crate::checkpoint::load_checkpoint(path)?;
    let meta: SslCkptMeta = ckpt.meta()?;
    let mut ps = ParamSet::new();
    let mut init_rng = stream(meta.seed, &[tag::SSL_INIT]);
    let model = SslModel::init(&mut ps, &meta.encoder, meta.n_units, &mut init_rng)?;
    let loaded = ckpt.load_into(&mut ps, |n| Some(n.to_string()))?;
    anyhow::ensure!(loaded == ps.len(), "checkpoint restored {loaded} of {} params", ps.len());
    Ok((ps, model, meta))
}
