//! Minimal WAV codec for the one format the pipeline speaks: PCM 16-bit
//! little-endian, mono, 16 kHz. Anything else is rejected with a clear
//! error. Sample mapping: write `i = clamp(round(x * 32768))`, read
//! `x = i / 32768`, matching the renderer's quantization grid so files
//! round-trip bit-exactly.

use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context, Result};
use valtime_core::dsp::Waveform;

pub const REQUIRED_SAMPLE_RATE: u32 = 16_000;

pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    if w.sample_rate != REQUIRED_SAMPLE_RATE {
        bail!("refusing to write {} Hz audio; the pipeline is 16 kHz only", w.sample_rate);
    }
    let n = w.samples.len();
    let data_len = (n * 2) as u32;
    let mut buf = Vec::with_capacity(44 + n * 2);
    buf.extend_from_slice(b"RIFF");
    buf.extend_from_slice(&(36 + data_len).to_le_bytes());
    buf.extend_from_slice(b"WAVE");
    buf.extend_from_slice(b"fmt ");
    buf.extend_from_slice(&16u32.to_le_bytes());
    buf.extend_from_slice(&1u16.to_le_bytes()); // PCM
    buf.extend_from_slice(&1u16.to_le_bytes()); // mono
    buf.extend_from_slice(&w.sample_rate.to_le_bytes());
    buf.extend_from_slice(&(w.sample_rate * 2).to_le_bytes()); // byte rate
    buf.extend_from_slice(&2u16.to_le_bytes()); // block align
    buf.extend_from_slice(&16u16.to_le_bytes()); // bits per sample
    buf.extend_from_slice(b"data");
    buf.extend_from_slice(&data_len.to_le_bytes());
    for &x in &w.samples {
        let i = (x * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        buf.extend_from_slice(&i.to_le_bytes());
    }
    let mut f = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    f.write_all(&buf)?;
    Ok(())
}

fn le_u32(b: &[u8], at: usize) -> Result<u32> {
    Ok(u32::from_le_bytes(
        b.get(at..at + 4).context("truncated WAV")?.try_into()?,
    ))
}

fn le_u16(b: &[u8], at: usize) -> Result<u16> {
    Ok(u16::from_le_bytes(
        b.get(at..at + 2).context("truncated WAV")?.try_into()?,
    ))
}

pub fn read_wav(path: &Path) -> Result<Waveform> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        bail!("{}: not a RIFF/WAVE file", path.display());
    }
    // Walk chunks; require a PCM fmt chunk before data.
    let mut pos = 12usize;
    let mut fmt: Option<(u16, u16, u32, u16)> = None;
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = le_u32(&bytes, pos + 4)? as usize;
        let body = bytes
            .get(pos + 8..pos + 8 + size)
            .with_context(|| format!("{}: chunk {:?} overruns file", path.display(), id))?;
        match id {
            b"fmt " => {
                if size < 16 {
                    bail!("{}: fmt chunk too small", path.display());
                }
                fmt = Some((
                    le_u16(body, 0)?,
                    le_u16(body, 2)?,
                    le_u32(body, 4)?,
                    le_u16(body, 14)?,
                ));
            }
            b"data" => {
                data = Some(body);
                break;
            }
            _ => {}
        }
        pos += 8 + size + (size & 1); // chunks are word-aligned
    }
    let (format, channels, rate, bits) = fmt.context("missing fmt chunk")?;
    if format != 1 {
        bail!("{}: unsupported WAV format tag {format}; only PCM is supported", path.display());
    }
    if channels != 1 {
        bail!("{}: {channels} channels; only mono is supported", path.display());
    }
    if bits != 16 {
        bail!("{}: {bits}-bit samples; only 16-bit PCM is supported", path.display());
    }
    if rate != REQUIRED_SAMPLE_RATE {
        bail!("{}: sample rate {rate}; only 16000 Hz is supported", path.display());
    }
    let data = data.context("missing data chunk")?;
    if data.len() % 2 != 0 {
        bail!("{}: odd data chunk length", path.display());
    }
    let samples = data
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 / 32768.0)
        .collect();
    Ok(Waveform::new(samples, rate)?)
}
