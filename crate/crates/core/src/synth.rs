//! Deterministic synthetic emotional-speech rendering.
//!
//! Each utterance is a harmonic source plus lowpassed noise under a
//! syllable-like amplitude envelope, with an F0 contour controlled by the
//! emotion label and a set of planted validation-timing cues: a terminal F0
//! fall, a trailing silent pause, and final-segment lengthening.
//!
//! All cues scale continuously with `cue_strength`; at strength 0 the audio
//! is independent of both labels (the renderer consumes the identical rng
//! draw sequence regardless of labels, so matched draws give byte-identical
//! audio). Samples are quantized to the 16-bit PCM grid at render time so a
//! WAV round trip reproduces them exactly.

use alloc::vec::Vec;

use crate::dsp::Waveform;
use crate::error::Error;
use crate::{rng, ChaCha8Rng, Result};

/// Spec for a deterministically generated corpus. Split sizes default to
/// the 919/231/220 layout with a 0.357 validate rate (the 489/881 class
/// ratio at 1370 utterances).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct CorpusSpec {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// (min, max) utterance duration in seconds.
    pub duration_range: (f64, f64),
    /// Planted-cue strength in [0, 1]; 0 means label-independent audio.
    pub cue_strength: f64,
    /// Fraction of utterances labeled validate, per split.
    pub validate_rate: f64,
    /// Synthetic speakers, allocated disjointly across splits.
    pub n_speakers: usize,
    pub sample_rate: u32,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            n_train: 919,
            n_val: 231,
            n_test: 220,
            duration_range: (0.5, 2.0),
            cue_strength: 0.9,
            validate_rate: 0.357,
            n_speakers: 18,
            sample_rate: 16_000,
            seed: 42,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 || self.n_val == 0 || self.n_test == 0 {
            return Err(Error::InvalidConfig("every split needs utterances".into()));
        }
        if !(0.0..=1.0).contains(&self.cue_strength) || !(0.0..=1.0).contains(&self.validate_rate) {
            return Err(Error::InvalidConfig(
                "cue_strength and validate_rate must be in [0,1]".into(),
            ));
        }
        let (lo, hi) = self.duration_range;
        if !(lo.is_finite() && hi.is_finite()) || lo < 0.3 || hi < lo {
            return Err(Error::InvalidConfig(
                "duration_range must satisfy 0.3 <= min <= max".into(),
            ));
        }
        if self.n_speakers < 3 {
            return Err(Error::InvalidConfig(
                "need at least 3 speakers for disjoint splits".into(),
            ));
        }
        if self.sample_rate == 0 {
            return Err(Error::InvalidConfig("sample_rate must be > 0".into()));
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.n_train + self.n_val + self.n_test
    }
}

/// Acoustic profile of one emotion at full cue strength.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmotionProfile {
    pub f0_mean: f64,
    /// Relative amplitude of the slow F0 wander.
    pub f0_wander: f64,
    /// Spectral tilt: harmonic h gets amplitude exp(-tilt*(h-1)).
    pub tilt: f64,
    /// Noise mix relative to the harmonic part.
    pub breath: f64,
    /// Peak level target.
    pub gain: f64,
}

const NEUTRAL_PROFILE: EmotionProfile = EmotionProfile {
    f0_mean: 130.0,
    f0_wander: 0.02,
    tilt: 0.60,
    breath: 0.04,
    gain: 0.90,
};

/// Full-strength profiles, indexed like [`crate::emotion::EMOTIONS`].
const EMOTION_PROFILES: [EmotionProfile; 7] = [
    // anger
    EmotionProfile { f0_mean: 165.0, f0_wander: 0.050, tilt: 0.25, breath: 0.10, gain: 1.00 },
    // disgust
    EmotionProfile { f0_mean: 110.0, f0_wander: 0.030, tilt: 0.90, breath: 0.06, gain: 0.85 },
    // fear
    EmotionProfile { f0_mean: 205.0, f0_wander: 0.090, tilt: 0.45, breath: 0.18, gain: 0.80 },
    // joy
    EmotionProfile { f0_mean: 185.0, f0_wander: 0.060, tilt: 0.35, breath: 0.05, gain: 0.95 },
    // neutral
    NEUTRAL_PROFILE,
    // sadness
    EmotionProfile { f0_mean: 95.0, f0_wander: 0.015, tilt: 1.10, breath: 0.12, gain: 0.70 },
    // surprise
    EmotionProfile { f0_mean: 225.0, f0_wander: 0.080, tilt: 0.30, breath: 0.07, gain: 1.00 },
];

/// Emotion profile interpolated toward neutral as cue strength drops; at
/// strength 0 every emotion sounds identical.
pub fn emotion_profile(emotion: usize, cue_strength: f64) -> EmotionProfile {
    let full = EMOTION_PROFILES[emotion];
    let q = cue_strength;
    let mix = |a: f64, b: f64| a + q * (b - a);
    EmotionProfile {
        f0_mean: mix(NEUTRAL_PROFILE.f0_mean, full.f0_mean),
        f0_wander: mix(NEUTRAL_PROFILE.f0_wander, full.f0_wander),
        tilt: mix(NEUTRAL_PROFILE.tilt, full.tilt),
        breath: mix(NEUTRAL_PROFILE.breath, full.breath),
        gain: mix(NEUTRAL_PROFILE.gain, full.gain),
    }
}

/// Per-utterance rendering parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderSpec {
    pub emotion: usize,
    /// Timing label: does a validating response follow this utterance.
    pub validate: bool,
    pub cue_strength: f64,
    pub duration_s: f64,
    /// Per-speaker F0 multiplier.
    pub speaker_f0_scale: f64,
    /// Per-speaker additive tilt shift.
    pub speaker_tilt_shift: f64,
    pub sample_rate: u32,
}

/// Trailing-pause length at full cue strength (seconds). At strengths
/// >= 0.75 the planted pause exceeds the 150 ms detection window.
pub const PAUSE_FULL_S: f64 = 0.2;
/// Fraction of the voiced region covered by the terminal F0 fall.
pub const FALL_REGION: f64 = 0.3;
/// Relative F0 drop at the utterance end at full cue strength.
pub const FALL_DEPTH: f64 = 0.45;
/// Relative lengthening of the final syllable at full cue strength.
pub const LENGTHEN: f64 = 0.6;

const N_HARMONICS: usize = 8;

/// Quantize to the 16-bit PCM grid used by the WAV codec
/// (`i = clamp(round(x*32768))`, `x = i/32768`).
pub fn quantize_i16_grid(x: f64) -> f64 {
    let i = libm::round(x * 32768.0).clamp(-32768.0, 32767.0);
    i / 32768.0
}

/// Render one utterance. The rng draw sequence depends only on the duration
/// (never on labels or cue strength), so matched draws at cue strength 0
/// yield byte-identical audio for both timing labels.
pub fn render_utterance(spec: &RenderSpec, rng: &mut ChaCha8Rng) -> Result<Waveform> {
    if spec.emotion >= EMOTION_PROFILES.len() {
        return Err(Error::InvalidValue(alloc::format!(
            "emotion id {} out of range",
            spec.emotion
        )));
    }
    if !(0.0..=1.0).contains(&spec.cue_strength) {
        return Err(Error::InvalidConfig("cue_strength must be in [0,1]".into()));
    }
    if spec.duration_s < 0.3 {
        return Err(Error::InvalidConfig("duration_s must be >= 0.3".into()));
    }
    let sr = spec.sample_rate as f64;
    let n = libm::round(spec.duration_s * sr) as usize;
    let profile = emotion_profile(spec.emotion, spec.cue_strength);
    let q = spec.cue_strength;
    let cue = if spec.validate { q } else { 0.0 };

    // Label-independent draws, in fixed order.
    let two_pi = 2.0 * core::f64::consts::PI;
    let wander_phase1 = rng::uniform(rng) * two_pi;
    let wander_phase2 = rng::uniform(rng) * two_pi;
    let wander_rate1 = 0.8 + 0.8 * rng::uniform(rng);
    let wander_rate2 = 2.2 + 1.2 * rng::uniform(rng);

    // Planted cues, deterministic given (label, strength).
    let pause_s = (PAUSE_FULL_S * cue).min(spec.duration_s - 0.3);
    let pause_n = libm::round(pause_s * sr) as usize;
    let voiced_n = n - pause_n;
    let voiced_s = voiced_n as f64 / sr;

    // Syllable layout over the voiced region; the final one stretches.
    let n_syll = libm::round(voiced_s * 3.5).max(1.0) as usize;
    let mut widths: Vec<f64> = (0..n_syll).map(|_| 1.0).collect();
    widths[n_syll - 1] = 1.0 + LENGTHEN * cue;
    let width_sum: f64 = widths.iter().sum();
    let mut bounds = Vec::with_capacity(n_syll + 1);
    bounds.push(0usize);
    let mut acc = 0.0;
    for w in &widths {
        acc += w;
        bounds.push(libm::round(acc / width_sum * voiced_n as f64) as usize);
    }

    let tilt = (profile.tilt + spec.speaker_tilt_shift).max(0.05);
    let mut harm_amp = [0.0; N_HARMONICS];
    let mut amp_sum = 0.0;
    for (h, a) in harm_amp.iter_mut().enumerate() {
        *a = libm::exp(-tilt * h as f64);
        amp_sum += *a;
    }
    for a in &mut harm_amp {
        *a /= amp_sum;
    }

    let mut samples = Vec::with_capacity(n);
    let mut phase = 0.0f64;
    let mut noise_state = 0.0f64;
    let mut syll = 0usize;
    for t in 0..n {
        // One noise draw per sample, voiced or not, keeps the draw count
        // independent of the pause length.
        let white = rng::normal(rng);
        if t >= voiced_n {
            samples.push(0.0);
            continue;
        }
        let u = t as f64 / voiced_n as f64;
        let secs = t as f64 / sr;

        // F0 contour: declination, slow wander, terminal fall.
        let wander = 1.0
            + profile.f0_wander
                * (libm::sin(two_pi * wander_rate1 * secs + wander_phase1)
                    + 0.6 * libm::sin(two_pi * wander_rate2 * secs + wander_phase2));
        let fall = if u > 1.0 - FALL_REGION {
            1.0 - FALL_DEPTH * cue * (u - (1.0 - FALL_REGION)) / FALL_REGION
        } else {
            1.0
        };
        let f0 = profile.f0_mean * spec.speaker_f0_scale * (1.0 - 0.08 * u) * wander * fall;
        phase += two_pi * f0 / sr;
        if phase > two_pi {
            phase -= two_pi;
        }

        // Syllable envelope (raised bumps with soft floors) plus global
        // 20 ms attack/release.
        while syll + 1 < n_syll && t >= bounds[syll + 1] {
            syll += 1;
        }
        let s_len = (bounds[syll + 1] - bounds[syll]).max(1);
        let sp = (t - bounds[syll]) as f64 / s_len as f64;
        let mut env = 0.25 + 0.75 * libm::sin(core::f64::consts::PI * sp);
        let edge = 0.02 * sr;
        if (t as f64) < edge {
            env *= t as f64 / edge;
        }
        let remaining = (voiced_n - t) as f64;
        if remaining < edge {
            env *= remaining / edge;
        }

        let mut harm = 0.0;
        for (h, &a) in harm_amp.iter().enumerate() {
            harm += a * libm::sin((h + 1) as f64 * phase);
        }
        noise_state = 0.7 * noise_state + 0.3 * white;
        samples.push(env * (harm + profile.breath * noise_state));
    }

    // Deterministic peak normalization, then 16-bit grid quantization.
    let peak = samples.iter().fold(0.0f64, |m, &x| m.max(x.abs()));
    let target = 0.75 * profile.gain;
    if peak > 0.0 {
        let scale = target / peak;
        for s in &mut samples {
            *s = quantize_i16_grid(*s * scale);
        }
    }
    Waveform::new(samples, spec.sample_rate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn spec(emotion: usize, validate: bool, cue: f64, dur: f64) -> RenderSpec {
        RenderSpec {
            emotion,
            validate,
            cue_strength: cue,
            duration_s: dur,
            speaker_f0_scale: 1.0,
            speaker_tilt_shift: 0.0,
            sample_rate: 16_000,
        }
    }

    #[test]
    fn same_seed_is_byte_identical() {
        let s = spec(3, true, 0.8, 1.2);
        let mut r1 = rng::stream(42, &[1, 7]);
        let mut r2 = rng::stream(42, &[1, 7]);
        let a = render_utterance(&s, &mut r1).unwrap();
        let b = render_utterance(&s, &mut r2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn cue_strength_zero_is_label_and_emotion_independent() {
        for (e1, e2) in [(0usize, 4usize), (2, 5)] {
            let mut r1 = rng::stream(7, &[e1 as u64]);
            let mut r2 = rng::stream(7, &[e1 as u64]);
            let a = render_utterance(&spec(e1, true, 0.0, 0.9), &mut r1).unwrap();
            let b = render_utterance(&spec(e2, false, 0.0, 0.9), &mut r2).unwrap();
            assert_eq!(a, b, "strength-0 audio must ignore labels");
        }
    }

    #[test]
    fn full_strength_validate_plants_a_silent_tail() {
        let mut r = rng::stream(9, &[3]);
        let w = render_utterance(&spec(1, true, 1.0, 1.5), &mut r).unwrap();
        let tail = &w.samples[w.samples.len() - 2400..]; // final 150 ms
        let rms = libm::sqrt(tail.iter().map(|x| x * x).sum::<f64>() / tail.len() as f64);
        assert!(rms < 1e-3, "tail rms {rms}");
        // Non-validate rendering keeps energy in the tail.
        let mut r = rng::stream(9, &[3]);
        let w = render_utterance(&spec(1, false, 1.0, 1.5), &mut r).unwrap();
        let tail = &w.samples[w.samples.len() - 2400..];
        let rms = libm::sqrt(tail.iter().map(|x| x * x).sum::<f64>() / tail.len() as f64);
        assert!(rms > 1e-2, "non-validate tail rms {rms}");
    }

    #[test]
    fn samples_sit_on_the_pcm16_grid_within_range() {
        let mut r = rng::stream(11, &[0]);
        let w = render_utterance(&spec(6, false, 0.9, 0.7), &mut r).unwrap();
        for &x in &w.samples {
            assert!(x.abs() <= 1.0);
            assert_eq!(x, quantize_i16_grid(x));
        }
        assert!(w.samples.iter().any(|&x| x != 0.0));
    }

    #[test]
    fn duration_is_respected() {
        let mut r = rng::stream(13, &[0]);
        let w = render_utterance(&spec(0, true, 0.5, 1.0), &mut r).unwrap();
        assert_eq!(w.samples.len(), 16_000);
    }

    #[test]
    fn emotions_differ_at_full_strength() {
        let mut r1 = rng::stream(17, &[0]);
        let mut r2 = rng::stream(17, &[0]);
        let a = render_utterance(&spec(5, false, 1.0, 0.8), &mut r1).unwrap();
        let b = render_utterance(&spec(6, false, 1.0, 0.8), &mut r2).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn corpus_spec_validation() {
        assert!(CorpusSpec::default().validate().is_ok());
        let bad = CorpusSpec {
            validate_rate: 1.5,
            ..CorpusSpec::default()
        };
        assert!(bad.validate().is_err());
    }
}
