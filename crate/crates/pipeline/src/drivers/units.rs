//! `fit-units`: MFCC extraction over the training split, seeded frame
//! subsampling, k-means fitting, and codebook persistence.

use std::path::Path;

use anyhow::{Context, Result};
use rayon::prelude::*;
use valtime_core::dsp::{extract_mfcc, FeatureSequence, Waveform};
use valtime_core::rng;
use valtime_core::units::{fit_kmeans_traced, KMeansModel};

use crate::checkpoint::save_kmeans;
use crate::config::RunConfig;
use crate::corpus::{CorpusData, LoadedUtterance};
use crate::drivers::tag;

/// MFCC features for a set of utterances, in order.
pub fn corpus_mfcc(utts: &[LoadedUtterance], cfg: &RunConfig) -> Result<Vec<FeatureSequence>> {
    utts.par_iter()
        .map(|u| {
            let w = Waveform::new(u.samples.clone(), cfg.corpus.sample_rate)?;
            extract_mfcc(&w, &cfg.mfcc).with_context(|| format!("MFCC for {}", u.entry.id))
        })
        .collect()
}

pub struct UnitsOutcome {
    pub model: KMeansModel,
    pub n_frames_fit: usize,
    pub inertia_history: Vec<f64>,
}

/// Fit the unit codebook on the training split and write it to `out_path`.
pub fn fit_units(corpus: &CorpusData, cfg: &RunConfig, out_path: &Path) -> Result<UnitsOutcome> {
    let feats = corpus_mfcc(&corpus.train, cfg)?;
    let dim = cfg.mfcc.n_coeffs;
    let total_frames: usize = feats.iter().map(|f| f.len()).sum();

    // Cap the fitting set by a seeded uniform subsample of frame indices.
    let cap = cfg.units.max_fit_frames;
    let mut keep: Vec<usize> = (0..total_frames).collect();
    if total_frames > cap {
        let mut r = rng::stream(cfg.train.seed, &[tag::UNIT_SUBSAMPLE]);
        rng::shuffle(&mut r, &mut keep);
        keep.truncate(cap);
        keep.sort_unstable();
    }

    let mut frames = Vec::with_capacity(keep.len() * dim);
    let mut cursor = 0usize;
    let mut keep_iter = keep.iter().peekable();
    'outer: for f in &feats {
        for i in 0..f.len() {
            match keep_iter.peek() {
                Some(&&k) if k == cursor => {
                    frames.extend_from_slice(f.frame(i));
                    keep_iter.next();
                }
                None => break 'outer,
                _ => {}
            }
            cursor += 1;
        }
    }
    let n = frames.len() / dim;

    let (model, history) = fit_kmeans_traced(
        &frames,
        n,
        dim,
        cfg.units.k,
        cfg.units.max_iters,
        cfg.train.seed,
    )?;
    if let Some(parent) = out_path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    save_kmeans(out_path, &model)?;
    Ok(UnitsOutcome {
        model,
        n_frames_fit: n,
        inertia_history: history,
    })
}
