//! Run configuration: one TOML file covering every pipeline stage, with CLI
//! flags overriding file values. The effective config is echoed into each
//! run directory before any work starts.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use valtime_core::dsp::MfccConfig;
use valtime_core::encoder::EncoderConfig;
use valtime_core::fusion::{BranchPolicy, BranchSelect, FusionConfig, FusionStrategy};
use valtime_core::ssl::{MASK_PROB, MASK_SPAN};
use valtime_core::synth::CorpusSpec;
use valtime_core::train::TrainConfig;

/// K-means unit discovery settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UnitsConfig {
    pub k: usize,
    /// Fitting frames are capped at this count by seeded subsampling.
    pub max_fit_frames: usize,
    pub max_iters: usize,
}

impl Default for UnitsConfig {
    fn default() -> Self {
        Self {
            k: 100,
            max_fit_frames: 200_000,
            max_iters: 60,
        }
    }
}

/// Span-masking settings for SSL pretraining.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskConfig {
    pub prob: f64,
    pub span: usize,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            prob: MASK_PROB,
            span: MASK_SPAN,
        }
    }
}

/// Per-stage loop overrides on top of the base `[train]` settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageSchedule {
    pub max_epochs: usize,
    /// 0 = evaluate once per epoch.
    pub eval_every: u64,
    /// 0 disables early stopping (fixed-epoch protocols).
    pub patience: u32,
}

impl Default for StageSchedule {
    fn default() -> Self {
        Self {
            max_epochs: 10,
            eval_every: 0,
            patience: 5,
        }
    }
}

/// Timing-stage settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TimingSection {
    pub strategy: FusionStrategy,
    pub policy_para: BranchPolicy,
    pub policy_emo: BranchPolicy,
    pub branches: BranchSelect,
    /// Downsample the training majority class to this count (0 keeps the
    /// natural skew).
    pub balance_majority_to: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub schedule: StageSchedule,
}

impl Default for TimingSection {
    fn default() -> Self {
        Self {
            strategy: FusionStrategy::Concat,
            policy_para: BranchPolicy::Finetune,
            policy_emo: BranchPolicy::Finetune,
            branches: BranchSelect::Both,
            balance_majority_to: 329,
            lora_rank: valtime_core::fusion::LORA_RANK,
            lora_alpha: valtime_core::fusion::LORA_ALPHA,
            schedule: StageSchedule {
                max_epochs: 12,
                eval_every: 20,
                patience: 5,
            },
        }
    }
}

/// The whole-run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub corpus: CorpusSpec,
    pub mfcc: MfccConfig,
    pub encoder: EncoderConfig,
    pub units: UnitsConfig,
    pub mask: MaskConfig,
    pub train: TrainConfig,
    pub pretrain: PretrainSection,
    pub emotion: EmotionSection,
    pub timing: TimingSection,
    pub fusion: FusionConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainSection {
    pub schedule: StageSchedule,
}

impl Default for PretrainSection {
    fn default() -> Self {
        Self {
            schedule: StageSchedule {
                max_epochs: 5,
                eval_every: 0,
                patience: 0,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmotionSection {
    pub schedule: StageSchedule,
}

impl Default for EmotionSection {
    fn default() -> Self {
        Self {
            schedule: StageSchedule {
                max_epochs: 5,
                eval_every: 30,
                patience: 5,
            },
        }
    }
}

impl RunConfig {
    /// Load from an optional TOML file (defaults when absent).
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut cfg: RunConfig = match path {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
            }
            None => RunConfig::default(),
        };
        if let Some(seed) = cfg.seed {
            cfg.corpus.seed = seed;
            cfg.train.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Apply a CLI seed override to every stage.
    pub fn override_seed(&mut self, seed: u64) {
        self.seed = Some(seed);
        self.corpus.seed = seed;
        self.train.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.mfcc.validate()?;
        self.encoder.validate()?;
        self.train.validate()?;
        self.fusion.validate()?;
        anyhow::ensure!(self.units.k >= 1, "units.k must be >= 1");
        anyhow::ensure!(self.units.max_fit_frames >= self.units.k, "units.max_fit_frames must be >= k");
        anyhow::ensure!((0.0..=1.0).contains(&self.mask.prob), "mask.prob must be in [0,1]");
        anyhow::ensure!(self.mask.span >= 1, "mask.span must be >= 1");
        Ok(())
    }

    /// Effective TrainConfig for a stage schedule.
    pub fn stage_train(&self, schedule: &StageSchedule) -> TrainConfig {
        TrainConfig {
            max_epochs: schedule.max_epochs,
            eval_every: schedule.eval_every,
            patience: if schedule.patience == 0 { u32::MAX } else { schedule.patience },
            ..self.train.clone()
        }
    }

    /// Echo the effective config into a run directory.
    pub fn echo_into(&self, run_dir: &Path) -> Result<()> {
        fs::create_dir_all(run_dir)?;
        let text = toml::to_string(self).context("serializing effective config")?;
        fs::write(run_dir.join("config.toml"), text)?;
        Ok(())
    }
}
