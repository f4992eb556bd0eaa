//! Shared optimization loop: AdamW with decoupled weight decay, linear
//! warmup to a constant learning rate, gradient accumulation, early stopping
//! on a selection metric, and class-balance downsampling.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::Error;
use crate::params::ParamSet;
use crate::{rng, Result};

/// Optimization settings. Defaults follow the training protocol used across
/// all three stages: AdamW at 1e-5 with weight decay 0.01, effective batch
/// 16 via accumulation, 100-step warmup, 20 epochs max, patience 5, seed 42.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
    pub accumulation: usize,
    pub max_epochs: usize,
    pub patience: u32,
    /// Evaluate every this many optimizer steps (0 = once per epoch).
    pub eval_every: u64,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            weight_decay: 0.01,
            warmup_steps: 100,
            accumulation: 16,
            max_epochs: 20,
            patience: 5,
            eval_every: 0,
            seed: 42,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 || self.weight_decay < 0.0 || self.eps <= 0.0 {
            return Err(Error::InvalidConfig("lr/eps must be positive".into()));
        }
        if self.accumulation == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::InvalidConfig(
                "accumulation, max_epochs and patience must be >= 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidConfig("betas must be in [0,1)".into()));
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `cfg.lr` over `warmup_steps`, constant afterwards
/// (no decay). Steps count from 1.
pub fn lr_schedule(step: u64, cfg: &TrainConfig) -> f64 {
    debug_assert!(step >= 1);
    if cfg.warmup_steps == 0 || step >= cfg.warmup_steps {
        cfg.lr
    } else {
        cfg.lr * step as f64 / cfg.warmup_steps as f64
    }
}

/// AdamW with decoupled weight decay: the decay term `lr*wd*p` is applied to
/// the parameter directly and never enters the gradient moments, so with a
/// zero gradient a parameter shrinks by exactly that amount per step.
#[derive(Debug, Clone)]
pub struct AdamW {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(cfg: &TrainConfig, params: &ParamSet) -> Self {
        let m = params.iter().map(|(_, p)| vec![0.0; p.values.len()]).collect();
        let v = params.iter().map(|(_, p)| vec![0.0; p.values.len()]).collect();
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            t: 0,
            m,
            v,
        }
    }

    /// Apply one update from the gradients accumulated in `params`, then
    /// clear them. Frozen parameters are untouched.
    pub fn step(&mut self, params: &mut ParamSet, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - libm::pow(self.beta1, self.t as f64);
        let bc2 = 1.0 - libm::pow(self.beta2, self.t as f64);
        for idx in 0..params.len() {
            let p = params.get_mut(crate::params::ParamId(idx));
            if !p.trainable {
                continue;
            }
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            for j in 0..p.values.len() {
                let g = p.grad[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                let update = lr * m_hat / (libm::sqrt(v_hat) + self.eps);
                let decay = lr * self.weight_decay * p.values[j];
                p.values[j] = p.values[j] - update - decay;
            }
        }
        params.zero_grads();
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }
}

/// Early-stopping bookkeeping: best metric seen, its step, and how many
/// evaluations have passed without strict improvement.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopState {
    pub best_metric: f64,
    pub best_step: u64,
    pub evals_since_improvement: u32,
}

impl Default for EarlyStopState {
    fn default() -> Self {
        Self {
            best_metric: f64::NEG_INFINITY,
            best_step: 0,
            evals_since_improvement: 0,
        }
    }
}

impl EarlyStopState {
    /// Record an evaluation. Returns true when the metric strictly improved.
    pub fn observe(&mut self, step: u64, metric: f64) -> bool {
        if metric > self.best_metric {
            self.best_metric = metric;
            self.best_step = step;
            self.evals_since_improvement = 0;
            true
        } else {
            self.evals_since_improvement += 1;
            false
        }
    }

    pub fn exhausted(&self, patience: u32) -> bool {
        self.evals_since_improvement >= patience
    }
}

/// Downsample the majority class to `target_majority_count` by a seeded
/// uniform draw without replacement; every other class is kept untouched.
/// Returns the kept indices into `labels`, sorted ascending.
pub fn balance_downsample(labels: &[usize], target_majority_count: usize, seed: u64) -> Result<Vec<usize>> {
    if labels.is_empty() {
        return Err(Error::Empty("balance_downsample on empty label list"));
    }
    let n_classes = labels.iter().max().unwrap() + 1;
    let mut counts = vec![0usize; n_classes];
    for &l in labels {
        counts[l] += 1;
    }
    // Majority class; ties break toward the lower label.
    let majority = (0..n_classes).max_by_key(|&c| (counts[c], core::cmp::Reverse(c))).unwrap();
    if target_majority_count > counts[majority] {
        return Err(Error::InvalidValue(format!(
            "target {target_majority_count} exceeds majority class count {}",
            counts[majority]
        )));
    }
    let mut majority_indices: Vec<usize> = labels
        .iter()
        .enumerate()
        .filter(|(_, &l)| l == majority)
        .map(|(i, _)| i)
        .collect();
    let mut r = rng::stream(seed, &[0xba1a_9ce5]);
    rng::shuffle(&mut r, &mut majority_indices);
    majority_indices.truncate(target_majority_count);
    let mut kept: Vec<usize> = labels
        .iter()
        .enumerate()
        .filter(|(_, &l)| l != majority)
        .map(|(i, _)| i)
        .collect();
    kept.extend(majority_indices);
    kept.sort_unstable();
    Ok(kept)
}

/// Why a training run ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum StopReason {
    Patience,
    MaxEpochs,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub best_metric: f64,
    pub best_step: u64,
    pub optimizer_steps: u64,
    pub evaluations: u64,
    pub stop: StopReason,
}

/// The callbacks one training stage plugs into [`train_loop`]. A single
/// object owns all mutable state (parameters, optimizer, logs), which keeps
/// the loop itself free of aliasing concerns.
pub trait TrainTask {
    type Error;

    /// Process one micro-batch chunk: accumulate gradients scaled by
    /// `1/chunk_len` and return the chunk's mean loss.
    fn run_chunk(&mut self, chunk: &[usize], step: u64, epoch: usize)
        -> core::result::Result<f64, Self::Error>;

    /// Apply one optimizer update at the scheduled learning rate.
    fn optim_step(&mut self, lr: f64, step: u64) -> core::result::Result<(), Self::Error>;

    /// Compute the selection metric (higher is better).
    fn evaluate(&mut self, step: u64) -> core::result::Result<f64, Self::Error>;

    /// Called when `evaluate` strictly improved; capture the best state.
    fn snapshot(&mut self, step: u64, metric: f64) -> core::result::Result<(), Self::Error>;
}

/// The shared outer loop.
///
/// Shuffles `n_train` sample indices each epoch (seeded), hands them to the
/// task in groups of `cfg.accumulation`, then steps the optimizer. Every
/// `eval_every` optimizer steps (and at the very end) the task is evaluated;
/// on strict improvement `snapshot` fires. Stops after `patience`
/// consecutive non-improving evaluations or `max_epochs`.
pub fn train_loop<T: TrainTask>(
    cfg: &TrainConfig,
    n_train: usize,
    task: &mut T,
) -> core::result::Result<TrainOutcome, TrainLoopError<T::Error>> {
    if n_train == 0 {
        return Err(TrainLoopError::EmptySplit);
    }
    cfg.validate().map_err(TrainLoopError::Config)?;
    let steps_per_epoch = n_train.div_ceil(cfg.accumulation) as u64;
    let eval_every = if cfg.eval_every == 0 { steps_per_epoch } else { cfg.eval_every };

    let mut indices: Vec<usize> = (0..n_train).collect();
    let mut early = EarlyStopState::default();
    let mut step: u64 = 0;
    let mut evals: u64 = 0;
    let mut last_eval_step: u64 = 0;
    let mut stop = StopReason::MaxEpochs;

    'outer: for epoch in 0..cfg.max_epochs {
        let mut r = rng::stream(cfg.seed, &[0x5f1e, epoch as u64]);
        rng::shuffle(&mut r, &mut indices);
        for chunk in indices.chunks(cfg.accumulation) {
            task.run_chunk(chunk, step + 1, epoch).map_err(TrainLoopError::Task)?;
            step += 1;
            task.optim_step(lr_schedule(step, cfg), step).map_err(TrainLoopError::Task)?;
            if step % eval_every == 0 {
                let metric = task.evaluate(step).map_err(TrainLoopError::Task)?;
                evals += 1;
                last_eval_step = step;
                if early.observe(step, metric) {
                    task.snapshot(step, metric).map_err(TrainLoopError::Task)?;
                }
                if early.exhausted(cfg.patience) {
                    stop = StopReason::Patience;
                    break 'outer;
                }
            }
        }
    }
    // Final evaluation if training ended between scheduled evaluations.
    if stop == StopReason::MaxEpochs && last_eval_step != step {
        let metric = task.evaluate(step).map_err(TrainLoopError::Task)?;
        evals += 1;
        if early.observe(step, metric) {
            task.snapshot(step, early.best_metric).map_err(TrainLoopError::Task)?;
        }
    }
    Ok(TrainOutcome {
        best_metric: early.best_metric,
        best_step: early.best_step,
        optimizer_steps: step,
        evaluations: evals,
        stop,
    })
}

/// Loop-level failure: either plumbing (empty split, bad config) or an error
/// surfaced by one of the task closures.
#[derive(Debug)]
pub enum TrainLoopError<E> {
    EmptySplit,
    Config(Error),
    Task(E),
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamSet;

    #[test]
    fn schedule_warms_up_linearly_then_stays_constant() {
        let cfg = TrainConfig::default();
        assert!((lr_schedule(50, &cfg) - 5e-6).abs() < 1e-18);
        assert_eq!(lr_schedule(100, &cfg), 1e-5);
        assert_eq!(lr_schedule(10_000, &cfg), 1e-5);
    }

    #[test]
    fn adamw_zero_grad_shrinks_by_exactly_lr_times_decay() {
        let cfg = TrainConfig {
            warmup_steps: 0,
            ..TrainConfig::default()
        };
        let mut ps = ParamSet::new();
        let w = ps.add("w", 1, 3, vec![1.0, -2.0, 0.5]);
        let mut opt = AdamW::new(&cfg, &ps);
        let before = ps.get(w).values.clone();
        opt.step(&mut ps, cfg.lr);
        for (after, b) in ps.get(w).values.iter().zip(&before) {
            let expect = b - cfg.lr * cfg.weight_decay * b;
            assert_eq!(after.to_bits(), expect.to_bits());
        }
    }

    #[test]
    fn adamw_moves_against_the_gradient_and_skips_frozen() {
        let cfg = TrainConfig::default();
        let mut ps = ParamSet::new();
        let w = ps.add("w", 1, 2, vec![0.0, 0.0]);
        let f = ps.add("f", 1, 1, vec![1.0]);
        ps.set_trainable(f, false);
        let mut opt = AdamW::new(&cfg, &ps);
        ps.add_grads(&[(w.index(), vec![1.0, -1.0])], 1.0);
        ps.add_grads(&[(f.index(), vec![5.0])], 1.0);
        opt.step(&mut ps, 1e-3);
        assert!(ps.get(w).values[0] < 0.0);
        assert!(ps.get(w).values[1] > 0.0);
        assert_eq!(ps.get(f).values, vec![1.0]);
        // Gradients cleared after the step.
        assert_eq!(ps.get(w).grad, vec![0.0, 0.0]);
    }

    #[test]
    fn downsample_matches_documented_counts() {
        // 340 validate / 579 non-validate, target 329 -> (340, 329).
        let mut labels = vec![1usize; 340];
        labels.extend(vec![0usize; 579]);
        let kept = balance_downsample(&labels, 329, 42).unwrap();
        let v = kept.iter().filter(|&&i| labels[i] == 1).count();
        let nv = kept.iter().filter(|&&i| labels[i] == 0).count();
        assert_eq!((v, nv), (340, 329));
        // Determinism.
        let again = balance_downsample(&labels, 329, 42).unwrap();
        assert_eq!(kept, again);
        let different = balance_downsample(&labels, 329, 43).unwrap();
        assert_ne!(kept, different);
        // Identity when the target equals the majority count.
        let all = balance_downsample(&labels, 579, 7).unwrap();
        assert_eq!(all.len(), labels.len());
        // Target above the majority count errors.
        assert!(balance_downsample(&labels, 580, 7).is_err());
    }

    /// Scripted task: records chunk sizes and sample order, returns metric
    /// values from a fixed script.
    struct Scripted {
        script: Vec<f64>,
        evals_seen: usize,
        snapshots: Vec<(u64, f64)>,
        sizes: Vec<usize>,
        order: Vec<usize>,
    }

    impl Scripted {
        fn new(script: &[f64]) -> Self {
            Self {
                script: script.to_vec(),
                evals_seen: 0,
                snapshots: Vec::new(),
                sizes: Vec::new(),
                order: Vec::new(),
            }
        }
    }

    impl TrainTask for Scripted {
        type Error = ();

        fn run_chunk(&mut self, chunk: &[usize], _step: u64, _epoch: usize) -> core::result::Result<f64, ()> {
            self.sizes.push(chunk.len());
            self.order.extend_from_slice(chunk);
            Ok(0.0)
        }

        fn optim_step(&mut self, _lr: f64, _step: u64) -> core::result::Result<(), ()> {
            Ok(())
        }

        fn evaluate(&mut self, _step: u64) -> core::result::Result<f64, ()> {
            let m = self.script.get(self.evals_seen).copied().unwrap_or(0.0);
            self.evals_seen += 1;
            Ok(m)
        }

        fn snapshot(&mut self, step: u64, metric: f64) -> core::result::Result<(), ()> {
            self.snapshots.push((step, metric));
            Ok(())
        }
    }

    #[test]
    fn early_stopping_follows_the_scripted_sequence() {
        // Metrics per evaluation; patience 5 stops after the 5th
        // non-improving eval, so the final .35 is never evaluated.
        let cfg = TrainConfig {
            accumulation: 1,
            eval_every: 1,
            max_epochs: 100,
            patience: 5,
            ..TrainConfig::default()
        };
        let mut task = Scripted::new(&[0.3, 0.4, 0.4, 0.39, 0.38, 0.37, 0.36, 0.35]);
        let outcome = train_loop(&cfg, 1, &mut task).unwrap();
        assert_eq!(task.evals_seen, 7, "stops after the 5th non-improving eval");
        assert_eq!(outcome.stop, StopReason::Patience);
        assert_eq!(outcome.best_metric, 0.4);
        assert_eq!(outcome.best_step, 2);
        // Snapshot fired for .3 and the first .4 only (ties don't improve).
        assert_eq!(task.snapshots.len(), 2);
    }

    #[test]
    fn loop_rejects_empty_split_and_chunks_respect_accumulation() {
        let cfg = TrainConfig {
            accumulation: 4,
            max_epochs: 2,
            eval_every: 1000,
            ..TrainConfig::default()
        };
        let mut task = Scripted::new(&[]);
        assert!(matches!(
            train_loop(&cfg, 0, &mut task),
            Err(TrainLoopError::EmptySplit)
        ));
        let mut task = Scripted::new(&[0.0; 8]);
        let outcome = train_loop(&cfg, 10, &mut task).unwrap();
        // 10 samples in chunks of 4 -> 4,4,2 per epoch, two epochs.
        assert_eq!(task.sizes, vec![4, 4, 2, 4, 4, 2]);
        assert_eq!(outcome.optimizer_steps, 6);
        // Final evaluation happened exactly once at the end.
        assert_eq!(outcome.evaluations, 1);
    }

    #[test]
    fn epoch_shuffles_are_seeded_and_cover_all_samples() {
        let cfg = TrainConfig {
            accumulation: 3,
            max_epochs: 1,
            eval_every: 1000,
            seed: 9,
            ..TrainConfig::default()
        };
        let run = || {
            let mut task = Scripted::new(&[0.0; 4]);
            train_loop(&cfg, 9, &mut task).unwrap();
            task.order
        };
        let a = run();
        let b = run();
        assert_eq!(a, b, "same seed, same order");
        let mut sorted = a.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..9).collect::<Vec<_>>());
    }
}
