//! Stage drivers: unit fitting, SSL pretraining, multi-task emotion
//! training, fusion/timing training, evaluation, and the ablation grids.
//! Every training driver writes the same run-directory layout: the echoed
//! config, a JSONL run log, `checkpoints/best.ckpt`, and a final report.

pub mod ablate;
pub mod emotion;
pub mod evaluate;
pub mod pretrain;
pub mod timing;
pub mod units;

use valtime_core::rng;
use valtime_core::ChaCha8Rng;

/// Stream tags, one per kind of randomness, so streams never collide
/// across stages or work items.
pub(crate) mod tag {
    pub const SSL_INIT: u64 = 0x01;
    pub const SSL_MASK: u64 = 0x02;
    pub const SSL_DROPOUT: u64 = 0x03;
    pub const SSL_VAL_MASK: u64 = 0x04;
    pub const MTL_INIT: u64 = 0x11;
    pub const MTL_DROPOUT: u64 = 0x12;
    pub const TIMING_INIT: u64 = 0x21;
    pub const TIMING_DROPOUT: u64 = 0x22;
    pub const TIMING_LORA: u64 = 0x23;
    pub const UNIT_SUBSAMPLE: u64 = 0x31;
    pub const EVAL: u64 = 0x41;
}

pub(crate) fn stream(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    rng::stream(seed, tags)
}

/// Argmax with ties toward the lowest index.
pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0usize;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Subdirectory holding checkpoints inside a run directory.
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
