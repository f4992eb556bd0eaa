//! MFCC front end.
//!
//! Converts raw waveforms into MFCC frame sequences. The chain is the usual
//! one: pre-emphasis, framing, Hamming window, power spectrum (radix-2 FFT),
//! mel triangular filterbank, log with a floor, DCT-II. No deltas, no
//! cepstral mean normalization.
//!
//! Conventions (fixed so cluster inventories are reproducible):
//! - pre-emphasis `y[n] = x[n] - a*x[n-1]`, `y[0] = x[0]`
//! - Hamming window `0.54 - 0.46*cos(2*pi*n/(N-1))`
//! - power spectrum `|X_k|^2` over bins `0..=n_fft/2`, no `1/N` scaling
//! - HTK mel scale `2595*log10(1 + f/700)`, filters spanning 0..sr/2
//! - unnormalized DCT-II `y_k = sum_n x_n * cos(pi*k*(2n+1)/(2N))`

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::Error;
use crate::Result;

/// Mono PCM audio. Samples are dimensionless amplitudes, nominally [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    /// Build a waveform, rejecting a zero sample rate or non-finite samples.
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidConfig("sample_rate must be > 0".into()));
        }
        if let Some(i) = samples.iter().position(|x| !x.is_finite()) {
            return Err(Error::InvalidValue(format!(
                "non-finite sample at index {i}"
            )));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// MFCC extraction parameters. Defaults: 25 ms frames, 10 ms hop at 16 kHz,
/// 512-point FFT, 26 mel filters, 13 cepstral coefficients.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct MfccConfig {
    /// Analysis window length in samples.
    pub frame_length: usize,
    /// Hop between frame starts in samples.
    pub hop: usize,
    /// FFT size; must be a power of two and >= frame_length.
    pub n_fft: usize,
    /// Number of triangular mel filters.
    pub n_mels: usize,
    /// Number of cepstral coefficients kept after the DCT.
    pub n_coeffs: usize,
    /// Pre-emphasis coefficient.
    pub pre_emphasis: f64,
    /// Floor applied before the log so silent frames stay finite.
    pub log_floor: f64,
}

impl Default for MfccConfig {
    fn default() -> Self {
        Self {
            frame_length: 400,
            hop: 160,
            n_fft: 512,
            n_mels: 26,
            n_coeffs: 13,
            pre_emphasis: 0.97,
            log_floor: 1e-10,
        }
    }
}

impl MfccConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hop == 0 {
            return Err(Error::InvalidConfig("hop must be >= 1".into()));
        }
        if self.frame_length == 0 || self.frame_length > self.n_fft {
            return Err(Error::InvalidConfig(format!(
                "frame_length {} must be in 1..=n_fft {}",
                self.frame_length, self.n_fft
            )));
        }
        if !self.n_fft.is_power_of_two() {
            return Err(Error::InvalidConfig(format!(
                "n_fft {} must be a power of two",
                self.n_fft
            )));
        }
        if self.n_coeffs == 0 || self.n_coeffs > self.n_mels {
            return Err(Error::InvalidConfig(format!(
                "n_coeffs {} must be in 1..=n_mels {}",
                self.n_coeffs, self.n_mels
            )));
        }
        if self.log_floor <= 0.0 {
            return Err(Error::InvalidConfig("log_floor must be > 0".into()));
        }
        Ok(())
    }
}

/// Time-major matrix of frame vectors plus a per-frame validity mask
/// (`true` = real frame, `false` = padding).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    data: Vec<f64>,
    rows: usize,
    cols: usize,
    valid: Vec<bool>,
}

impl FeatureSequence {
    pub fn new(data: Vec<f64>, rows: usize, cols: usize, valid: Vec<bool>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "feature data has {} values, expected {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        if valid.len() != rows {
            return Err(Error::ShapeMismatch(format!(
                "valid mask has {} entries for {} frames",
                valid.len(),
                rows
            )));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidValue("non-finite feature value".into()));
        }
        Ok(Self {
            data,
            rows,
            cols,
            valid,
        })
    }

    pub fn len(&self) -> usize {
        self.rows
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }

    pub fn dim(&self) -> usize {
        self.cols
    }

    pub fn frame(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn valid_mask(&self) -> &[bool] {
        &self.valid
    }

    pub fn n_valid(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// Number of analysis frames for a signal of `len` samples:
/// `1 + floor((len - frame_length)/hop)`, or `None` if the signal is shorter
/// than one frame.
pub fn frame_count(len: usize, frame_length: usize, hop: usize) -> Option<usize> {
    if len < frame_length {
        None
    } else {
        Some(1 + (len - frame_length) / hop)
    }
}

/// Unnormalized DCT-II: `y_k = sum_n x_n * cos(pi*k*(2n+1)/(2N))` for
/// `k = 0..n_out-1`. Requires `n_out <= x.len()`.
pub fn dct_ii(x: &[f64], n_out: usize) -> Result<Vec<f64>> {
    let n = x.len();
    if n_out > n {
        return Err(Error::InvalidConfig(format!(
            "dct_ii: n_out {n_out} exceeds input length {n}"
        )));
    }
    let mut out = vec![0.0; n_out];
    for (k, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (i, &xi) in x.iter().enumerate() {
            acc += xi * libm::cos(core::f64::consts::PI * k as f64 * (2 * i + 1) as f64
                / (2 * n) as f64);
        }
        *o = acc;
    }
    Ok(out)
}

/// Hamming window of length `n`.
pub fn hamming_window(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| {
            0.54 - 0.46 * libm::cos(2.0 * core::f64::consts::PI * i as f64 / (n - 1) as f64)
        })
        .collect()
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * libm::log10(1.0 + f / 700.0)
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (libm::pow(10.0, m / 2595.0) - 1.0)
}

/// Triangular mel filterbank, returned row-major as `n_mels` rows of
/// `n_fft/2 + 1` weights. Filters span 0..sr/2 on the HTK mel scale.
pub fn mel_filterbank(n_mels: usize, n_fft: usize, sample_rate: u32) -> Vec<f64> {
    let n_bins = n_fft / 2 + 1;
    let f_max = sample_rate as f64 / 2.0;
    let mel_max = hz_to_mel(f_max);
    // n_mels + 2 edge points, uniformly spaced in mel.
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(mel_max * i as f64 / (n_mels + 1) as f64))
        .collect();
    let bin_hz = sample_rate as f64 / n_fft as f64;
    let mut fb = vec![0.0; n_mels * n_bins];
    for m in 0..n_mels {
        let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..n_bins {
            let f = k as f64 * bin_hz;
            let w = if f <= lo || f >= hi {
                0.0
            } else if f <= center {
                (f - lo) / (center - lo)
            } else {
                (hi - f) / (hi - center)
            };
            fb[m * n_bins + k] = w;
        }
    }
    fb
}

/// Center frequency (Hz) of mel filter `m` under the same edge layout used
/// by [`mel_filterbank`].
pub fn mel_filter_center(m: usize, n_mels: usize, sample_rate: u32) -> f64 {
    let mel_max = hz_to_mel(sample_rate as f64 / 2.0);
    mel_to_hz(mel_max * (m + 1) as f64 / (n_mels + 1) as f64)
}

/// Power spectrum `|X_k|^2` for bins `0..=n_fft/2` of a (windowed) frame,
/// zero-padded to `n_fft`. `n_fft` must be a power of two.
pub fn power_spectrum(frame: &[f64], n_fft: usize) -> Vec<f64> {
    debug_assert!(n_fft.is_power_of_two());
    debug_assert!(frame.len() <= n_fft);
    let mut re = vec![0.0; n_fft];
    let mut im = vec![0.0; n_fft];
    re[..frame.len()].copy_from_slice(frame);
    fft_in_place(&mut re, &mut im);
    (0..=n_fft / 2).map(|k| re[k] * re[k] + im[k] * im[k]).collect()
}

/// Iterative radix-2 Cooley-Tukey FFT, in place.
fn fft_in_place(re: &mut [f64], im: &mut [f64]) {
    let n = re.len();
    debug_assert!(n.is_power_of_two());
    // Bit-reversal permutation.
    let mut j = 0usize;
    for i in 0..n {
        if i < j {
            re.swap(i, j);
            im.swap(i, j);
        }
        let mut bit = n >> 1;
        while j & bit != 0 {
            j ^= bit;
            bit >>= 1;
        }
        j |= bit;
    }
    let mut len = 2;
    while len <= n {
        let ang = -2.0 * core::f64::consts::PI / len as f64;
        let (w_re, w_im) = (libm::cos(ang), libm::sin(ang));
        let mut start = 0;
        while start < n {
            let (mut cur_re, mut cur_im) = (1.0, 0.0);
            for k in 0..len / 2 {
                let a = start + k;
                let b = a + len / 2;
                let t_re = re[b] * cur_re - im[b] * cur_im;
                let t_im = re[b] * cur_im + im[b] * cur_re;
                re[b] = re[a] - t_re;
                im[b] = im[a] - t_im;
                re[a] += t_re;
                im[a] += t_im;
                let next_re = cur_re * w_re - cur_im * w_im;
                cur_im = cur_re * w_im + cur_im * w_re;
                cur_re = next_re;
            }
            start += len;
        }
        len <<= 1;
    }
}

/// Mel filterbank energies of one already-windowed frame.
pub fn mel_energies(windowed: &[f64], filterbank: &[f64], n_fft: usize, n_mels: usize) -> Vec<f64> {
    let spec = power_spectrum(windowed, n_fft);
    let n_bins = n_fft / 2 + 1;
    (0..n_mels)
        .map(|m| {
            filterbank[m * n_bins..(m + 1) * n_bins]
                .iter()
                .zip(&spec)
                .map(|(w, p)| w * p)
                .sum()
        })
        .collect()
}

/// Extract MFCC frames from a waveform.
///
/// Produces `1 + floor((len - frame_length)/hop)` frames of `n_coeffs`
/// values each; the validity mask is all true. Fails with
/// [`Error::TooShort`] when the waveform cannot fill a single frame.
pub fn extract_mfcc(w: &Waveform, cfg: &MfccConfig) -> Result<FeatureSequence> {
    cfg.validate()?;
    let n = w.samples.len();
    let t = frame_count(n, cfg.frame_length, cfg.hop).ok_or(Error::TooShort {
        got: n,
        need: cfg.frame_length,
    })?;

    // Pre-emphasis over the whole signal.
    let mut emphasized = Vec::with_capacity(n);
    emphasized.push(w.samples[0]);
    for i in 1..n {
        emphasized.push(w.samples[i] - cfg.pre_emphasis * w.samples[i - 1]);
    }

    let window = hamming_window(cfg.frame_length);
    let fb = mel_filterbank(cfg.n_mels, cfg.n_fft, w.sample_rate);

    let mut data = Vec::with_capacity(t * cfg.n_coeffs);
    let mut windowed = vec![0.0; cfg.frame_length];
    for fi in 0..t {
        let start = fi * cfg.hop;
        for (j, w) in window.iter().enumerate() {
            windowed[j] = emphasized[start + j] * w;
        }
        let energies = mel_energies(&windowed, &fb, cfg.n_fft, cfg.n_mels);
        let log_e: Vec<f64> = energies
            .iter()
            .map(|&e| libm::log(e.max(cfg.log_floor)))
            .collect();
        data.extend(dct_ii(&log_e, cfg.n_coeffs)?);
    }
    FeatureSequence::new(data, t, cfg.n_coeffs, vec![true; t])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn sine(freq: f64, n: usize, sr: u32) -> Waveform {
        let samples = (0..n)
            .map(|i| libm::sin(2.0 * core::f64::consts::PI * freq * i as f64 / sr as f64))
            .collect();
        Waveform::new(samples, sr).unwrap()
    }

    /// Naive O(N^2) DFT power spectrum, the oracle for the FFT path.
    fn naive_power_spectrum(frame: &[f64], n_fft: usize) -> Vec<f64> {
        (0..=n_fft / 2)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for (n, &x) in frame.iter().enumerate() {
                    let ang = -2.0 * core::f64::consts::PI * k as f64 * n as f64 / n_fft as f64;
                    re += x * libm::cos(ang);
                    im += x * libm::sin(ang);
                }
                re * re + im * im
            })
            .collect()
    }

    #[test]
    fn frame_count_formula() {
        assert_eq!(frame_count(16000, 400, 160), Some(98));
        assert_eq!(frame_count(400, 400, 160), Some(1));
        assert_eq!(frame_count(399, 400, 160), None);
        // Exhaustive small sweep against a direct simulation.
        for len in 1..200usize {
            for frame in 1..20 {
                for hop in 1..10 {
                    let direct = if len < frame {
                        None
                    } else {
                        let mut t = 0;
                        let mut s = 0;
                        while s + frame <= len {
                            t += 1;
                            s += hop;
                        }
                        Some(t)
                    };
                    assert_eq!(frame_count(len, frame, hop), direct);
                }
            }
        }
    }

    #[test]
    fn dct_constant_input() {
        let y = dct_ii(&[1.0, 1.0, 1.0, 1.0], 4).unwrap();
        assert!((y[0] - 4.0).abs() < 1e-12);
        for k in 1..4 {
            assert!(y[k].abs() < 1e-12, "y[{k}] = {}", y[k]);
        }
    }

    #[test]
    fn dct_unit_impulse_closed_form() {
        let y = dct_ii(&[1.0, 0.0, 0.0, 0.0], 4).unwrap();
        for (k, &v) in y.iter().enumerate() {
            let expect = libm::cos(core::f64::consts::PI * k as f64 / 8.0);
            assert!((v - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn dct_matches_naive_oracle() {
        let mut r = rng::stream(3, &[1]);
        for _ in 0..10 {
            let x: Vec<f64> = (0..8).map(|_| rng::normal(&mut r)).collect();
            let y = dct_ii(&x, 8).unwrap();
            for k in 0..8 {
                let mut acc = 0.0;
                for n in 0..8 {
                    acc += x[n]
                        * libm::cos(core::f64::consts::PI * k as f64 * (2 * n + 1) as f64 / 16.0);
                }
                assert!((y[k] - acc).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn dct_rejects_excess_outputs() {
        assert!(dct_ii(&[1.0, 2.0], 3).is_err());
    }

    #[test]
    fn fft_matches_naive_dft() {
        let mut r = rng::stream(11, &[0]);
        let frame: Vec<f64> = (0..100).map(|_| rng::normal(&mut r)).collect();
        let fast = power_spectrum(&frame, 128);
        let slow = naive_power_spectrum(&frame, 128);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-8 * (1.0 + b.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn mfcc_shape_and_determinism() {
        let w = sine(440.0, 16000, 16000);
        let cfg = MfccConfig::default();
        let a = extract_mfcc(&w, &cfg).unwrap();
        let b = extract_mfcc(&w, &cfg).unwrap();
        assert_eq!(a.len(), 98);
        assert_eq!(a.dim(), 13);
        assert!(a.valid_mask().iter().all(|&v| v));
        assert_eq!(a, b, "MFCC must be bit-deterministic");
    }

    #[test]
    fn mfcc_too_short_errors() {
        let w = Waveform::new(vec![0.0; 399], 16000).unwrap();
        match extract_mfcc(&w, &MfccConfig::default()) {
            Err(Error::TooShort { got: 399, need: 400 }) => {}
            other => panic!("expected TooShort, got {other:?}"),
        }
    }

    #[test]
    fn mfcc_all_zero_waveform_is_dct_of_log_floor() {
        let cfg = MfccConfig::default();
        let w = Waveform::new(vec![0.0; 800], 16000).unwrap();
        let feats = extract_mfcc(&w, &cfg).unwrap();
        let constant = vec![libm::log(cfg.log_floor); cfg.n_mels];
        let expect = dct_ii(&constant, cfg.n_coeffs).unwrap();
        for i in 0..feats.len() {
            assert_eq!(feats.frame(i), &expect[..], "frame {i}");
        }
    }

    #[test]
    fn filterbank_rows_nonnegative_with_positive_sums() {
        let cfg = MfccConfig::default();
        let fb = mel_filterbank(cfg.n_mels, cfg.n_fft, 16000);
        let n_bins = cfg.n_fft / 2 + 1;
        for m in 0..cfg.n_mels {
            let row = &fb[m * n_bins..(m + 1) * n_bins];
            assert!(row.iter().all(|&w| w >= 0.0));
            assert!(row.iter().sum::<f64>() > 0.0, "filter {m} sums to zero");
        }
    }

    #[test]
    fn pure_tone_peaks_at_its_mel_filter() {
        // For a sine at the center frequency of filter j, the filterbank
        // energy must be maximal at j, and must agree with an independent
        // naive-DFT computation of the same quantities.
        let cfg = MfccConfig::default();
        let window = hamming_window(cfg.frame_length);
        let fb = mel_filterbank(cfg.n_mels, cfg.n_fft, 16000);
        for j in [4usize, 10, 18] {
            let f = mel_filter_center(j, cfg.n_mels, 16000);
            let w = sine(f, cfg.frame_length, 16000);
            let windowed: Vec<f64> = w
                .samples
                .iter()
                .zip(&window)
                .map(|(x, w)| x * w)
                .collect();
            let impl_energies = mel_energies(&windowed, &fb, cfg.n_fft, cfg.n_mels);
            // Independent oracle: naive DFT + filter weights.
            let spec = naive_power_spectrum(&windowed, cfg.n_fft);
            let n_bins = cfg.n_fft / 2 + 1;
            let oracle: Vec<f64> = (0..cfg.n_mels)
                .map(|m| {
                    fb[m * n_bins..(m + 1) * n_bins]
                        .iter()
                        .zip(&spec)
                        .map(|(w, p)| w * p)
                        .sum()
                })
                .collect();
            for (a, b) in impl_energies.iter().zip(&oracle) {
                assert!((a - b).abs() <= 1e-6 * (1.0 + b.abs()));
            }
            let argmax = impl_energies
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert_eq!(argmax, j, "tone at {f:.1} Hz should peak at filter {j}");
        }
    }

    #[test]
    fn scaling_shifts_only_c0_and_preserves_energy_ratios() {
        let mut r = rng::stream(5, &[2]);
        let cfg = MfccConfig::default();
        // Loud broadband noise keeps every filter above the log floor.
        let samples: Vec<f64> = (0..1600).map(|_| 0.5 * rng::normal(&mut r)).collect();
        let w = Waveform::new(samples.clone(), 16000).unwrap();
        let scaled = Waveform::new(samples.iter().map(|x| 3.0 * x).collect(), 16000).unwrap();

        // Pre-log energy ratios are exactly scale-invariant.
        let window = hamming_window(cfg.frame_length);
        let fb = mel_filterbank(cfg.n_mels, cfg.n_fft, 16000);
        let frame: Vec<f64> = w.samples[..400]
            .iter()
            .zip(&window)
            .map(|(x, win)| x * win)
            .collect();
        let frame_scaled: Vec<f64> = frame.iter().map(|x| 3.0 * x).collect();
        let e1 = mel_energies(&frame, &fb, cfg.n_fft, cfg.n_mels);
        let e2 = mel_energies(&frame_scaled, &fb, cfg.n_fft, cfg.n_mels);
        for m in 1..cfg.n_mels {
            let r1 = e1[m] / e1[0];
            let r2 = e2[m] / e2[0];
            assert!((r1 - r2).abs() < 1e-9 * (1.0 + r1.abs()));
        }

        // Through the full MFCC path the shift lands only on c0.
        let a = extract_mfcc(&w, &cfg).unwrap();
        let b = extract_mfcc(&scaled, &cfg).unwrap();
        let shift = cfg.n_mels as f64 * libm::log(9.0);
        for i in 0..a.len() {
            assert!((b.frame(i)[0] - a.frame(i)[0] - shift).abs() < 1e-6);
            for k in 1..cfg.n_coeffs {
                assert!((b.frame(i)[k] - a.frame(i)[k]).abs() < 1e-6);
            }
        }
    }
}
