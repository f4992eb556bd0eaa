//! Synthetic corpus generation and loading.
//!
//! Splits are speaker-disjoint; per-split label counts are quota-based so
//! class rates land within rounding of the spec. Rendering is parallel with
//! per-utterance rng streams keyed by (seed, utterance index); the manifest
//! is written last, atomically.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use valtime_core::dsp::Waveform;
use valtime_core::emotion::{sentiment_of, EMOTIONS, SENTIMENTS};
use valtime_core::rng;
use valtime_core::synth::{render_utterance, CorpusSpec, RenderSpec};

use crate::manifest::{read_manifest, write_manifest, ManifestEntry, Split};
use crate::wav::{read_wav, write_wav};

pub const MANIFEST_NAME: &str = "manifest.jsonl";

/// Mildly skewed emotion quota (real emotion label sets never come balanced);
/// neutral is the most common class.
const EMOTION_WEIGHTS: [f64; 7] = [0.12, 0.10, 0.11, 0.14, 0.24, 0.14, 0.15];

fn quota_labels(n: usize, weights: &[f64], seed: u64, tag: u64) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    let mut counts: Vec<usize> = weights.iter().map(|w| (w / total * n as f64).floor() as usize).collect();
    let mut assigned: usize = counts.iter().sum();
    // Distribute the remainder by largest fractional part, deterministic.
    let mut fracs: Vec<(usize, f64)> = weights
        .iter()
        .enumerate()
        .map(|(i, w)| (i, w / total * n as f64 - counts[i] as f64))
        .collect();
    fracs.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let mut fi = 0;
    while assigned < n {
        counts[fracs[fi % fracs.len()].0] += 1;
        assigned += 1;
        fi += 1;
    }
    let mut labels = Vec::with_capacity(n);
    for (label, &c) in counts.iter().enumerate() {
        labels.extend(std::iter::repeat(label).take(c));
    }
    let mut r = rng::stream(seed, &[0x1abe1, tag]);
    rng::shuffle(&mut r, &mut labels);
    labels
}

/// Speaker ids for one split; splits receive disjoint ranges.
fn split_speakers(spec: &CorpusSpec, split: Split) -> std::ops::Range<usize> {
    let n = spec.n_speakers;
    let n_test = (n / 6).max(1);
    let n_val = (n / 6).max(1);
    let n_train = n - n_val - n_test;
    match split {
        Split::Train => 0..n_train,
        Split::Val => n_train..n_train + n_val,
        Split::Test => n_train + n_val..n,
    }
}

/// Deterministic per-speaker voice constants.
fn speaker_voice(speaker: usize, seed: u64) -> (f64, f64) {
    let mut r = rng::stream(seed, &[0x5bea_bea5, speaker as u64]);
    let f0_scale = 0.85 + 0.4 * rng::uniform(&mut r);
    let tilt_shift = -0.1 + 0.2 * rng::uniform(&mut r);
    (f0_scale, tilt_shift)
}

/// Generate audio + manifest under `dir`. Returns the manifest entries.
pub fn generate_corpus(spec: &CorpusSpec, dir: &Path) -> Result<Vec<ManifestEntry>> {
    spec.validate()?;
    let wav_dir = dir.join("wav");
    fs::create_dir_all(&wav_dir).with_context(|| format!("creating {}", wav_dir.display()))?;

    struct Plan {
        index: usize,
        split: Split,
        emotion: usize,
        validate: bool,
        speaker: usize,
        duration_s: f64,
    }

    let mut plans = Vec::with_capacity(spec.total());
    let mut index = 0usize;
    for (split, n) in [
        (Split::Train, spec.n_train),
        (Split::Val, spec.n_val),
        (Split::Test, spec.n_test),
    ] {
        let tag = split as u64;
        let emotions = quota_labels(n, &EMOTION_WEIGHTS, spec.seed, tag);
        // Exact validate quota per split, shuffled.
        let n_validate = (spec.validate_rate * n as f64).round() as usize;
        let mut timing = vec![true; n_validate];
        timing.extend(vec![false; n - n_validate]);
        let mut r = rng::stream(spec.seed, &[0x7131, tag]);
        rng::shuffle(&mut r, &mut timing);
        let speakers = split_speakers(spec, split);
        for i in 0..n {
            // Duration from the per-utterance stream so rendering stays
            // independent of generation order.
            let mut dur_rng = rng::stream(spec.seed, &[0xd0_0d, index as u64]);
            let (lo, hi) = spec.duration_range;
            let duration_s = lo + (hi - lo) * rng::uniform(&mut dur_rng);
            plans.push(Plan {
                index,
                split,
                emotion: emotions[i],
                validate: timing[i],
                speaker: speakers.start + (i % speakers.len()),
                duration_s,
            });
            index += 1;
        }
    }

    let rendered: Vec<Result<(ManifestEntry, Waveform)>> = plans
        .par_iter()
        .map(|p| {
            let (f0_scale, tilt_shift) = speaker_voice(p.speaker, spec.seed);
            let rspec = RenderSpec {
                emotion: p.emotion,
                validate: p.validate,
                cue_strength: spec.cue_strength,
                duration_s: p.duration_s,
                speaker_f0_scale: f0_scale,
                speaker_tilt_shift: tilt_shift,
                sample_rate: spec.sample_rate,
            };
            let mut r = rng::stream(spec.seed, &[0xa0d10, p.index as u64]);
            let w = render_utterance(&rspec, &mut r)?;
            let id = format!("utt_{:05}", p.index);
            let entry = ManifestEntry {
                path: format!("wav/{id}.wav"),
                emotion: EMOTIONS[p.emotion].to_string(),
                emotion_id: p.emotion,
                sentiment: SENTIMENTS[sentiment_of(p.emotion)].to_string(),
                sentiment_id: sentiment_of(p.emotion),
                timing: if p.validate { "validate" } else { "non_validate" }.to_string(),
                timing_id: p.validate as usize,
                split: p.split,
                speaker: format!("spk_{:02}", p.speaker),
                duration_s: p.duration_s,
                n_samples: w.samples.len(),
                id,
            };
            Ok((entry, w))
        })
        .collect();

    let mut entries = Vec::with_capacity(plans.len());
    for r in rendered {
        let (entry, w) = r?;
        write_wav(&dir.join(&entry.path), &w)?;
        entries.push(entry);
    }
    // Manifest written last: a complete manifest implies complete audio.
    write_manifest(&dir.join(MANIFEST_NAME), &entries)?;
    Ok(entries)
}

/// One utterance with audio in memory.
pub struct LoadedUtterance {
    pub entry: ManifestEntry,
    pub samples: Vec<f64>,
}

/// A corpus fully loaded by split.
pub struct CorpusData {
    pub dir: PathBuf,
    pub train: Vec<LoadedUtterance>,
    pub val: Vec<LoadedUtterance>,
    pub test: Vec<LoadedUtterance>,
}

impl CorpusData {
    pub fn split(&self, split: Split) -> &[LoadedUtterance] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Read the manifest and decode every referenced WAV.
pub fn load_corpus(dir: &Path) -> Result<CorpusData> {
    let entries = read_manifest(&dir.join(MANIFEST_NAME))?;
    let loaded: Vec<Result<LoadedUtterance>> = entries
        .into_par_iter()
        .map(|entry| {
            let w = read_wav(&dir.join(&entry.path))?;
            if w.samples.len() != entry.n_samples {
                bail!(
                    "{}: manifest says {} samples, file has {}",
                    entry.id,
                    entry.n_samples,
                    w.samples.len()
                );
            }
            Ok(LoadedUtterance {
                entry,
                samples: w.samples,
            })
        })
        .collect();
    let mut data = CorpusData {
        dir: dir.to_path_buf(),
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for r in loaded {
        let u = r?;
        match u.entry.split {
            Split::Train => data.train.push(u),
            Split::Val => data.val.push(u),
            Split::Test => data.test.push(u),
        }
    }
    for (split, us) in [(Split::Train, &data.train), (Split::Val, &data.val), (Split::Test, &data.test)] {
        if us.is_empty() {
            bail!("corpus has no {split} utterances");
        }
    }
    Ok(data)
}
