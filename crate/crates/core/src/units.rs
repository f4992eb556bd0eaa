//! Acoustic unit discovery.
//!
//! Fits k-means (k-means++ seeding, Lloyd iterations) on MFCC frames to
//! produce discrete pseudo-target units, assigns frames to their nearest
//! centroid, and resamples unit sequences to the encoder frame rate.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::dsp::FeatureSequence;
use crate::error::Error;
use crate::{rng, Result};

/// A fitted k-means codebook over `dim`-dimensional frames.
#[derive(Debug, Clone, PartialEq)]
pub struct KMeansModel {
    /// `k` rows of `dim` values, row-major.
    pub centroids: Vec<f64>,
    pub k: usize,
    pub dim: usize,
    /// Sum of squared distances to nearest centroids at convergence.
    pub inertia: f64,
}

impl KMeansModel {
    pub fn centroid(&self, i: usize) -> &[f64] {
        &self.centroids[i * self.dim..(i + 1) * self.dim]
    }
}

/// Per-frame discrete pseudo-labels, each in `0..k`.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitSequence {
    pub units: Vec<u32>,
    /// Frames per second of the sequence.
    pub frame_rate: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid by squared Euclidean distance; ties break toward the
/// lowest centroid index.
fn nearest(centroids: &[f64], k: usize, dim: usize, frame: &[f64]) -> (usize, f64) {
    let mut best = 0usize;
    let mut best_d = f64::INFINITY;
    for c in 0..k {
        let d = sq_dist(&centroids[c * dim..(c + 1) * dim], frame);
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    (best, best_d)
}

/// Fit k-means with k-means++ initialization and Lloyd iterations until the
/// assignment fixpoint or `max_iters`. Deterministic for a fixed seed.
///
/// Empty clusters are re-seeded to the point farthest from its assigned
/// centroid. Returns the model plus the inertia after each Lloyd update
/// (non-increasing by construction; asserted).
pub fn fit_kmeans_traced(
    frames: &[f64],
    n: usize,
    dim: usize,
    k: usize,
    max_iters: usize,
    seed: u64,
) -> Result<(KMeansModel, Vec<f64>)> {
    if k == 0 {
        return Err(Error::InvalidConfig("k must be >= 1".into()));
    }
    if n < k {
        return Err(Error::InvalidValue(format!(
            "k-means needs at least k={k} frames, got {n}"
        )));
    }
    if frames.len() != n * dim {
        return Err(Error::ShapeMismatch(format!(
            "frame buffer has {} values, expected {}x{}",
            frames.len(),
            n,
            dim
        )));
    }
    if frames.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidValue("non-finite frame value".into()));
    }

    let mut r = rng::stream(seed, &[0x6b6d]);
    let mut centroids = vec![0.0; k * dim];

    // k-means++: first centroid uniform, the rest sampled with probability
    // proportional to squared distance from the chosen set.
    let first = rng::index(&mut r, n);
    centroids[..dim].copy_from_slice(&frames[first * dim..(first + 1) * dim]);
    let mut d2: Vec<f64> = (0..n)
        .map(|i| sq_dist(&frames[i * dim..(i + 1) * dim], &centroids[..dim]))
        .collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng::uniform(&mut r) * total;
            let mut idx = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    idx = i;
                    break;
                }
                target -= w;
            }
            idx
        } else {
            rng::index(&mut r, n)
        };
        let row = &frames[pick * dim..(pick + 1) * dim];
        centroids[c * dim..(c + 1) * dim].copy_from_slice(row);
        for i in 0..n {
            let d = sq_dist(&frames[i * dim..(i + 1) * dim], row);
            if d < d2[i] {
                d2[i] = d;
            }
        }
    }

    let mut assign = vec![usize::MAX; n];
    let mut trace = Vec::new();
    let mut inertia = f64::INFINITY;
    for _ in 0..max_iters.max(1) {
        // Assignment step.
        let mut changed = false;
        for i in 0..n {
            let (c, _) = nearest(&centroids, k, dim, &frames[i * dim..(i + 1) * dim]);
            if assign[i] != c {
                assign[i] = c;
                changed = true;
            }
        }
        if !changed && !trace.is_empty() {
            break;
        }
        // Update step.
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            let c = assign[i];
            counts[c] += 1;
            for (s, x) in sums[c * dim..(c + 1) * dim]
                .iter_mut()
                .zip(&frames[i * dim..(i + 1) * dim])
            {
                *s += x;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for (dst, s) in centroids[c * dim..(c + 1) * dim].iter_mut().zip(
                    &sums[c * dim..(c + 1) * dim],
                ) {
                    *dst = s / counts[c] as f64;
                }
            }
        }
        // Re-seed empty clusters to the currently farthest point.
        let empties: Vec<usize> = (0..k).filter(|&c| counts[c] == 0).collect();
        for c in empties {
            let far = (0..n)
                .max_by(|&a, &b| {
                    let da = nearest(&centroids, k, dim, &frames[a * dim..(a + 1) * dim]).1;
                    let db = nearest(&centroids, k, dim, &frames[b * dim..(b + 1) * dim]).1;
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap();
            let row = &frames[far * dim..(far + 1) * dim];
            centroids[c * dim..(c + 1) * dim].copy_from_slice(row);
        }
        // Inertia after the update; Lloyd guarantees non-increase.
        let new_inertia: f64 = (0..n)
            .map(|i| nearest(&centroids, k, dim, &frames[i * dim..(i + 1) * dim]).1)
            .sum();
        assert!(
            new_inertia <= inertia * (1.0 + 1e-12) + 1e-12,
            "Lloyd inertia increased: {inertia} -> {new_inertia}"
        );
        inertia = new_inertia;
        trace.push(new_inertia);
    }

    Ok((
        KMeansModel {
            centroids,
            k,
            dim,
            inertia,
        },
        trace,
    ))
}

/// [`fit_kmeans_traced`] without the per-iteration inertia trace.
pub fn fit_kmeans(
    frames: &[f64],
    n: usize,
    dim: usize,
    k: usize,
    max_iters: usize,
    seed: u64,
) -> Result<KMeansModel> {
    fit_kmeans_traced(frames, n, dim, k, max_iters, seed).map(|(m, _)| m)
}

/// Map every frame to its nearest centroid. `frame_rate` is the feature
/// rate of `feats` in frames per second.
pub fn assign_units(
    model: &KMeansModel,
    feats: &FeatureSequence,
    frame_rate: f64,
) -> Result<UnitSequence> {
    if feats.dim() != model.dim {
        return Err(Error::ShapeMismatch(format!(
            "feature dim {} does not match centroid dim {}",
            feats.dim(),
            model.dim
        )));
    }
    let units = (0..feats.len())
        .map(|i| nearest(&model.centroids, model.k, model.dim, feats.frame(i)).0 as u32)
        .collect();
    Ok(UnitSequence { units, frame_rate })
}

/// Nearest-index resampling to `target_len`:
/// `out[i] = units[min(T-1, round(i*T/target_len))]`.
pub fn align_units(units: &UnitSequence, target_len: usize) -> Result<UnitSequence> {
    let t = units.units.len();
    if t == 0 {
        return Err(Error::Empty("align_units on empty unit sequence"));
    }
    if target_len == 0 {
        return Err(Error::InvalidConfig("target_len must be >= 1".into()));
    }
    let out = (0..target_len)
        .map(|i| {
            let src = libm::round(i as f64 * t as f64 / target_len as f64) as usize;
            units.units[src.min(t - 1)]
        })
        .collect();
    Ok(UnitSequence {
        units: out,
        frame_rate: units.frame_rate * target_len as f64 / t as f64,
    })
}
