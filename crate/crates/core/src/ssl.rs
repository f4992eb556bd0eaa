//! Masked-unit self-supervised pretraining of the paralinguistic encoder.
//!
//! Spans of feature frames are masked (their encoder inputs replaced by a
//! learned embedding) and a linear head predicts the k-means unit of each
//! masked frame. Only masked, non-padded positions enter the loss; padded or
//! unmasked positions contribute exactly nothing, in value or gradient.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::encoder::{encode, EncodeOpts, EncoderConfig, EncoderParams};
use crate::error::Error;
use crate::params::{ParamId, ParamSet};
use crate::tape::{Tape, TensorId};
use crate::units::UnitSequence;
use crate::{rng, ChaCha8Rng, Result};

/// Feature-rate mask: which frames are masked for prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSpec {
    pub masked: Vec<bool>,
    pub mask_prob: f64,
    pub span_len: usize,
}

impl MaskSpec {
    pub fn n_masked(&self) -> usize {
        self.masked.iter().filter(|m| **m).count()
    }
}

/// Default span-masking parameters.
pub const MASK_PROB: f64 = 0.065;
pub const MASK_SPAN: usize = 10;

/// Sample span masks over `valid_len` frames: every index is a span start
/// independently with probability `p`; each start masks
/// `min(span_len, valid_len - start)` consecutive frames; spans union. When
/// no start fires, one uniformly random span is forced so the loss always
/// has at least one target.
pub fn sample_span_masks(valid_len: usize, p: f64, span_len: usize, rng: &mut ChaCha8Rng) -> MaskSpec {
    assert!(valid_len >= 1, "sample_span_masks needs at least one frame");
    assert!(span_len >= 1);
    let mut masked = vec![false; valid_len];
    let mut any = false;
    for start in 0..valid_len {
        if rng::bernoulli(rng, p) {
            any = true;
            for m in masked.iter_mut().skip(start).take(span_len) {
                *m = true;
            }
        }
    }
    if !any {
        let start = rng::index(rng, valid_len);
        for m in masked.iter_mut().skip(start).take(span_len) {
            *m = true;
        }
    }
    MaskSpec {
        masked,
        mask_prob: p,
        span_len,
    }
}

/// Unit-classifier head and the learned masked-input embedding.
#[derive(Debug, Clone)]
pub struct SslHead {
    /// (K, d_model) unit classifier.
    pub w: ParamId,
    pub b: ParamId,
    /// (1, d_model) embedding substituted at masked positions.
    pub mask_emb: ParamId,
}

/// Encoder plus SSL head.
pub struct SslModel {
    pub encoder: EncoderParams,
    pub head: SslHead,
    pub n_units: usize,
}

impl SslModel {
    pub fn init(ps: &mut ParamSet, enc_cfg: &EncoderConfig, n_units: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if n_units == 0 {
            return Err(Error::InvalidConfig("n_units must be >= 1".into()));
        }
        let encoder = EncoderParams::init(ps, "enc.", enc_cfg, rng)?;
        // Zero-init head: the initial loss is exactly ln K.
        let head = SslHead {
            w: ps.add_zeros("ssl.head.w", n_units, enc_cfg.d_model),
            b: ps.add_zeros("ssl.head.b", 1, n_units),
            mask_emb: ps.add_normal("ssl.mask_emb", 1, enc_cfg.d_model, 0.1, rng),
        };
        Ok(Self {
            encoder,
            head,
            n_units,
        })
    }
}

/// Mean cross-entropy over the masked, non-padded index set A. Sentinel
/// target `K` marks excluded positions, so their logits never touch the
/// loss and their gradient is exactly zero.
pub fn ssl_loss(
    tape: &mut Tape,
    logits: TensorId,
    units: &[u32],
    mask: &MaskSpec,
    valid: &[bool],
) -> Result<TensorId> {
    let t = tape.rows(logits);
    let k = tape.cols(logits);
    if units.len() != t || mask.masked.len() != t || valid.len() != t {
        return Err(Error::ShapeMismatch(format!(
            "ssl_loss lengths disagree: {} logit rows, {} units, {} mask, {} valid",
            t,
            units.len(),
            mask.masked.len(),
            valid.len()
        )));
    }
    let targets: Vec<usize> = (0..t)
        .map(|i| {
            if mask.masked[i] && valid[i] {
                units[i] as usize
            } else {
                k
            }
        })
        .collect();
    if targets.iter().all(|&y| y == k) {
        return Err(Error::Empty("ssl_loss with no masked valid positions"));
    }
    tape.cross_entropy(logits, &targets, None, Some(k))
}

/// One SSL training step's graph for a single utterance: encode with masked
/// inputs replaced by the learned embedding, project every frame to unit
/// logits, and reduce to the masked-prediction loss. `units` must already
/// be aligned to the encoder frame rate over the valid frames.
pub fn ssl_step(
    tape: &mut Tape,
    ps: &ParamSet,
    model: &SslModel,
    enc_cfg: &EncoderConfig,
    samples: &[f64],
    valid_raw_len: usize,
    units: &UnitSequence,
    mask: &MaskSpec,
    rng: &mut ChaCha8Rng,
) -> Result<TensorId> {
    let mut full_mask = mask.masked.clone();
    let out = {
        let opts_probe = EncodeOpts::default();
        // Feature frame count decides the padded mask length.
        let _ = opts_probe;
        let t_total = crate::encoder::feature_length(samples.len(), &enc_cfg.conv_stack)?;
        if full_mask.len() > t_total {
            return Err(Error::ShapeMismatch(format!(
                "mask of {} frames for {} feature frames",
                full_mask.len(),
                t_total
            )));
        }
        full_mask.resize(t_total, false);
        let opts = EncodeOpts {
            mask_replace: Some((&full_mask, model.head.mask_emb)),
            lora: None,
        };
        encode(tape, ps, &model.encoder, enc_cfg, samples, valid_raw_len, &opts, rng)?
    };
    let w = tape.param(ps, model.head.w);
    let b = tape.param(ps, model.head.b);
    let logits = tape.linear(out.states, w, b);
    let mut padded_units = vec![0u32; tape.rows(logits)];
    let n = units.units.len().min(padded_units.len());
    padded_units[..n].copy_from_slice(&units.units[..n]);
    let full_spec = MaskSpec {
        masked: full_mask,
        mask_prob: mask.mask_prob,
        span_len: mask.span_len,
    };
    ssl_loss(tape, logits, &padded_units, &full_spec, &out.valid)
}
