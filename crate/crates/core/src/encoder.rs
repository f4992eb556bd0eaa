//! Shared speech encoder: a strided 1-D conv downsampler with an exact
//! raw-length to feature-length mapping, sinusoidal positions, and a small
//! pre-norm transformer stack. Two independently parameterized instances of
//! this architecture serve as the paralinguistic and emotion branches.
//!
//! The default conv stack [(10,5),(8,4),(8,4),(4,2)] has total stride 160,
//! so at 16 kHz the encoder frame rate equals the 10 ms MFCC hop and unit
//! alignment is the identity.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::Error;
use crate::fusion::EncoderLora;
use crate::params::{ParamId, ParamSet};
use crate::tape::{multi_head_attention, MhaWeights, Tape, TensorId, ATTN_MASK_NEG};
use crate::{ChaCha8Rng, Result};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    /// (kernel, stride) per conv layer.
    pub conv_stack: Vec<(usize, usize)>,
    /// Output channels per conv layer; the last must equal `d_model`.
    pub conv_channels: Vec<usize>,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            conv_stack: vec![(10, 5), (8, 4), (8, 4), (4, 2)],
            conv_channels: vec![16, 32, 64, 64],
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            ffn_dim: 128,
            dropout: 0.1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.conv_stack.is_empty() {
            return Err(Error::InvalidConfig("conv_stack must be nonempty".into()));
        }
        if self.conv_channels.len() != self.conv_stack.len() {
            return Err(Error::InvalidConfig(format!(
                "{} conv_channels for {} conv layers",
                self.conv_channels.len(),
                self.conv_stack.len()
            )));
        }
        if self.conv_stack.iter().any(|&(k, s)| k == 0 || s == 0) {
            return Err(Error::InvalidConfig("conv kernels and strides must be >= 1".into()));
        }
        if *self.conv_channels.last().unwrap() != self.d_model {
            return Err(Error::InvalidConfig(format!(
                "last conv channel count {} must equal d_model {}",
                self.conv_channels.last().unwrap(),
                self.d_model
            )));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_layers == 0 || self.ffn_dim == 0 {
            return Err(Error::InvalidConfig("n_layers and ffn_dim must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidConfig(format!("dropout {}", self.dropout)));
        }
        Ok(())
    }

    /// Total temporal stride of the conv stack.
    pub fn total_stride(&self) -> usize {
        self.conv_stack.iter().map(|&(_, s)| s).product()
    }
}

/// Raw sample count to feature frame count: sequentially apply
/// `len <- (len - kernel)/stride + 1` per conv layer. Errors as soon as an
/// intermediate length cannot fill the next kernel.
pub fn feature_length(raw_len: usize, conv_stack: &[(usize, usize)]) -> Result<usize> {
    let mut len = raw_len;
    for &(kernel, stride) in conv_stack {
        if len < kernel {
            return Err(Error::TooShort {
                got: len,
                need: kernel,
            });
        }
        len = (len - kernel) / stride + 1;
    }
    Ok(len)
}

/// Parameter handles of one transformer layer.
#[derive(Debug, Clone)]
pub struct LayerParams {
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    pub ff1_w: ParamId,
    pub ff1_b: ParamId,
    pub ff2_w: ParamId,
    pub ff2_b: ParamId,
}

/// Parameter handles of one encoder instance. Instances initialized under
/// different prefixes share the architecture but never the parameters.
#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub prefix: String,
    pub conv: Vec<(ParamId, ParamId)>,
    pub post_conv_ln: (ParamId, ParamId),
    pub layers: Vec<LayerParams>,
    pub final_ln: (ParamId, ParamId),
}

impl EncoderParams {
    /// Register fresh parameters under `prefix` (e.g. `"para."`).
    pub fn init(ps: &mut ParamSet, prefix: &str, cfg: &EncoderConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let mut conv = Vec::new();
        let mut c_in = 1usize;
        for (i, (&(kernel, _), &c_out)) in cfg.conv_stack.iter().zip(&cfg.conv_channels).enumerate() {
            let std = 1.0 / libm::sqrt((kernel * c_in) as f64);
            let w = ps.add_normal(format!("{prefix}conv{i}.w"), c_out, kernel * c_in, std, rng);
            let b = ps.add_zeros(format!("{prefix}conv{i}.b"), 1, c_out);
            conv.push((w, b));
            c_in = c_out;
        }
        let d = cfg.d_model;
        let post_conv_ln = (
            ps.add_const(format!("{prefix}post_conv_ln.g"), 1, d, 1.0),
            ps.add_zeros(format!("{prefix}post_conv_ln.b"), 1, d),
        );
        let std_d = 1.0 / libm::sqrt(d as f64);
        let std_ffn = 1.0 / libm::sqrt(cfg.ffn_dim as f64);
        let mut layers = Vec::new();
        for l in 0..cfg.n_layers {
            let p = |name: &str| format!("{prefix}layer{l}.{name}");
            layers.push(LayerParams {
                ln1_g: ps.add_const(p("ln1.g"), 1, d, 1.0),
                ln1_b: ps.add_zeros(p("ln1.b"), 1, d),
                wq: ps.add_normal(p("attn.wq"), d, d, std_d, rng),
                bq: ps.add_zeros(p("attn.bq"), 1, d),
                wk: ps.add_normal(p("attn.wk"), d, d, std_d, rng),
                bk: ps.add_zeros(p("attn.bk"), 1, d),
                wv: ps.add_normal(p("attn.wv"), d, d, std_d, rng),
                bv: ps.add_zeros(p("attn.bv"), 1, d),
                wo: ps.add_normal(p("attn.wo"), d, d, std_d, rng),
                bo: ps.add_zeros(p("attn.bo"), 1, d),
                ln2_g: ps.add_const(p("ln2.g"), 1, d, 1.0),
                ln2_b: ps.add_zeros(p("ln2.b"), 1, d),
                ff1_w: ps.add_normal(p("ffn.w1"), cfg.ffn_dim, d, std_d, rng),
                ff1_b: ps.add_zeros(p("ffn.b1"), 1, cfg.ffn_dim),
                ff2_w: ps.add_normal(p("ffn.w2"), d, cfg.ffn_dim, std_ffn, rng),
                ff2_b: ps.add_zeros(p("ffn.b2"), 1, d),
            });
        }
        let final_ln = (
            ps.add_const(format!("{prefix}final_ln.g"), 1, d, 1.0),
            ps.add_zeros(format!("{prefix}final_ln.b"), 1, d),
        );
        Ok(Self {
            prefix: prefix.into(),
            conv,
            post_conv_ln,
            layers,
            final_ln,
        })
    }
}

/// Sinusoidal absolute position table, (t, d) row-major.
pub fn sinusoidal_positions(t: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; t * d];
    for pos in 0..t {
        for i in 0..d / 2 {
            let rate = libm::pow(10_000.0, -2.0 * i as f64 / d as f64);
            out[pos * d + 2 * i] = libm::sin(pos as f64 * rate);
            out[pos * d + 2 * i + 1] = libm::cos(pos as f64 * rate);
        }
    }
    out
}

/// Per-forward options: masked-input replacement (SSL) and low-rank
/// adapters (fine-tuning ablations).
#[derive(Default)]
pub struct EncodeOpts<'a> {
    /// Feature-rate mask and the learned embedding that replaces masked
    /// rows at the transformer input.
    pub mask_replace: Option<(&'a [bool], ParamId)>,
    pub lora: Option<&'a EncoderLora>,
}

/// Encoder forward output for one utterance.
pub struct EncoderOut {
    /// (t_total, d_model) hidden states on the tape.
    pub states: TensorId,
    /// Validity per feature frame; exactly the first `n_valid` are true.
    pub valid: Vec<bool>,
    pub n_valid: usize,
}

/// Encode one utterance. `samples` may carry trailing padding beyond
/// `valid_raw_len`; frames derived from padding are excluded from attention
/// (additive mask) and flagged false in the output validity mask, so they
/// never influence valid frames.
pub fn encode(
    tape: &mut Tape,
    ps: &ParamSet,
    enc: &EncoderParams,
    cfg: &EncoderConfig,
    samples: &[f64],
    valid_raw_len: usize,
    opts: &EncodeOpts,
    rng: &mut ChaCha8Rng,
) -> Result<EncoderOut> {
    if valid_raw_len > samples.len() {
        return Err(Error::InvalidValue(format!(
            "valid_raw_len {} exceeds buffer length {}",
            valid_raw_len,
            samples.len()
        )));
    }
    let n_valid = feature_length(valid_raw_len, &cfg.conv_stack)?;
    let t_total = feature_length(samples.len(), &cfg.conv_stack)?;
    let d = cfg.d_model;

    let mut x = tape.leaf(samples.len(), 1, samples.to_vec());
    for (i, &(kernel, stride)) in cfg.conv_stack.iter().enumerate() {
        let (w, b) = enc.conv[i];
        let tw = tape.param(ps, w);
        let tb = tape.param(ps, b);
        let conv = tape.conv1d(x, tw, tb, kernel, stride);
        x = tape.gelu(conv);
    }
    debug_assert_eq!(tape.rows(x), t_total);

    let g = tape.param(ps, enc.post_conv_ln.0);
    let b = tape.param(ps, enc.post_conv_ln.1);
    x = tape.layer_norm(x, g, b, 1e-5);

    if let Some((mask, emb)) = opts.mask_replace {
        if mask.len() != t_total {
            return Err(Error::ShapeMismatch(format!(
                "mask length {} for {} feature frames",
                mask.len(),
                t_total
            )));
        }
        let temb = tape.param(ps, emb);
        x = tape.replace_masked_rows(x, temb, mask);
    }

    let pos = tape.leaf(t_total, d, sinusoidal_positions(t_total, d));
    x = tape.add(x, pos);

    let key_mask: Vec<f64> = (0..t_total)
        .map(|i| if i < n_valid { 0.0 } else { ATTN_MASK_NEG })
        .collect();
    let key_mask = if n_valid == t_total { None } else { Some(key_mask) };

    for (l, layer) in enc.layers.iter().enumerate() {
        let g1 = tape.param(ps, layer.ln1_g);
        let b1 = tape.param(ps, layer.ln1_b);
        let normed = tape.layer_norm(x, g1, b1, 1e-5);
        let w = MhaWeights {
            wq: tape.param(ps, layer.wq),
            bq: tape.param(ps, layer.bq),
            wk: tape.param(ps, layer.wk),
            bk: tape.param(ps, layer.bk),
            wv: tape.param(ps, layer.wv),
            bv: tape.param(ps, layer.bv),
            wo: tape.param(ps, layer.wo),
            bo: tape.param(ps, layer.bo),
        };
        let adapters = opts.lora.map(|lo| &lo.layers[l]);
        let q_ad = adapters.map(|a| a.q.on_tape(tape, ps));
        let v_ad = adapters.map(|a| a.v.on_tape(tape, ps));
        let attn = multi_head_attention(tape, normed, &w, cfg.n_heads, key_mask.as_deref(), q_ad, v_ad)?;
        let attn_d = tape.dropout(attn.out, cfg.dropout, rng);
        x = tape.add(x, attn_d);

        let g2 = tape.param(ps, layer.ln2_g);
        let b2 = tape.param(ps, layer.ln2_b);
        let normed2 = tape.layer_norm(x, g2, b2, 1e-5);
        let w1 = tape.param(ps, layer.ff1_w);
        let b1f = tape.param(ps, layer.ff1_b);
        let h = tape.linear(normed2, w1, b1f);
        let h = tape.gelu(h);
        let w2 = tape.param(ps, layer.ff2_w);
        let b2f = tape.param(ps, layer.ff2_b);
        let ff = tape.linear(h, w2, b2f);
        let ff_d = tape.dropout(ff, cfg.dropout, rng);
        x = tape.add(x, ff_d);
    }

    let gf = tape.param(ps, enc.final_ln.0);
    let bf = tape.param(ps, enc.final_ln.1);
    let states = tape.layer_norm(x, gf, bf, 1e-5);

    let valid: Vec<bool> = (0..t_total).map(|i| i < n_valid).collect();
    Ok(EncoderOut {
        states,
        valid,
        n_valid,
    })
}
