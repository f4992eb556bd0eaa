//! Parallel micro-batch gradient evaluation.
//!
//! Each sample's forward/backward runs on its own tape against a shared
//! read-only parameter store; per-sample gradients are then reduced in
//! sample order, so results are bit-identical to a sequential run no matter
//! the worker count.

use anyhow::Result;
use rayon::prelude::*;
use valtime_core::params::ParamSet;

/// Loss value plus sparse per-parameter gradients of one sample.
pub type SampleGrads = (f64, Vec<(usize, Vec<f64>)>);

/// Run `per_sample` for every index in the chunk (in parallel), then fold
/// gradients into `ps` scaled by `1/chunk_len` so the effective-batch
/// gradient is the unweighted mean. Returns the chunk's mean loss.
pub fn accumulate_chunk<F>(ps: &mut ParamSet, chunk: &[usize], per_sample: F) -> Result<f64>
where
    F: Fn(usize, &ParamSet) -> Result<SampleGrads> + Sync,
{
    let scale = 1.0 / chunk.len() as f64;
    let results: Vec<Result<SampleGrads>> = {
        let shared: &ParamSet = ps;
        chunk.par_iter().map(|&i| per_sample(i, shared)).collect()
    };
    let mut mean_loss = 0.0;
    for r in results {
        let (loss, grads) = r?;
        mean_loss += loss * scale;
        ps.add_grads(&grads, scale);
    }
    Ok(mean_loss)
}
