//! Branch fusion and the validate/non-validate classifier.
//!
//! Takes the pooled embeddings of the paralinguistic and emotion encoders,
//! projects each into a shared 256-dim space (linear, GELU, dropout), fuses
//! them with one of four strategies (concat, attention, gated, multi-head
//! attention) and maps the fused vector to two-way logits. Also home to the
//! LoRA adapters and the per-branch freeze/finetune/LoRA policy machinery
//! used by the training-strategy ablations.
//!
//! Class-index convention, fixed globally: 1 = validate, 0 = non-validate.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::encoder::{encode, EncodeOpts, EncoderConfig, EncoderParams};
use crate::error::Error;
use crate::params::{ParamId, ParamSet};
use crate::tape::{multi_head_attention, MhaWeights, Tape, TensorId};
use crate::{ChaCha8Rng, Result};

/// How the two projected branch embeddings are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionStrategy {
    /// Concatenation; fused dim = 2 * proj_dim.
    Concat,
    /// Shared two-layer tanh MLP scores each branch; softmax over the two
    /// scores weights a sum. Fused dim = proj_dim.
    Attention,
    /// Sigmoid gate over the concatenation blends elementwise:
    /// `g.*h1 + (1-g).*h2`. Fused dim = proj_dim.
    Gated,
    /// The two embeddings form a length-2 sequence through one multi-head
    /// attention layer, mean-pooled. Fused dim = proj_dim.
    Mha,
}

impl FusionStrategy {
    pub const ALL: [FusionStrategy; 4] = [
        FusionStrategy::Concat,
        FusionStrategy::Attention,
        FusionStrategy::Gated,
        FusionStrategy::Mha,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FusionStrategy::Concat => "concat",
            FusionStrategy::Attention => "attention",
            FusionStrategy::Gated => "gated",
            FusionStrategy::Mha => "mha",
        }
    }
}

impl core::str::FromStr for FusionStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "concat" => Ok(FusionStrategy::Concat),
            "attention" => Ok(FusionStrategy::Attention),
            "gated" => Ok(FusionStrategy::Gated),
            "mha" => Ok(FusionStrategy::Mha),
            other => Err(Error::InvalidConfig(format!("unknown fusion strategy '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub strategy: FusionStrategy,
    pub proj_dim: usize,
    pub dropout: f64,
    pub mha_heads: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            strategy: FusionStrategy::Concat,
            proj_dim: 256,
            dropout: 0.1,
            mha_heads: 4,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.proj_dim == 0 {
            return Err(Error::InvalidConfig("proj_dim must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidConfig(format!("dropout {}", self.dropout)));
        }
        if self.mha_heads == 0 || self.proj_dim % self.mha_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "proj_dim {} not divisible by mha_heads {}",
                self.proj_dim, self.mha_heads
            )));
        }
        Ok(())
    }

    /// Input width of the final classifier under this strategy.
    pub fn fused_dim(&self) -> usize {
        match self.strategy {
            FusionStrategy::Concat => 2 * self.proj_dim,
            _ => self.proj_dim,
        }
    }
}

/// Per-branch training policy for the fusion stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BranchPolicy {
    Freeze,
    Finetune,
    Lora,
}

impl BranchPolicy {
    pub fn name(self) -> &'static str {
        match self {
            BranchPolicy::Freeze => "freeze",
            BranchPolicy::Finetune => "finetune",
            BranchPolicy::Lora => "lora",
        }
    }
}

impl core::str::FromStr for BranchPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "freeze" => Ok(BranchPolicy::Freeze),
            "finetune" => Ok(BranchPolicy::Finetune),
            "lora" => Ok(BranchPolicy::Lora),
            other => Err(Error::InvalidConfig(format!("unknown branch policy '{other}'"))),
        }
    }
}

/// Low-rank adapter over one frozen linear map:
/// `forward = W x + b + (alpha/r) * B (A x)`. `B` starts at zero so the
/// wrapped layer initially equals the base layer bit-for-bit.
#[derive(Debug, Clone)]
pub struct LoraAdapter {
    /// (rank, d_in) down-projection, Gaussian init.
    pub a: ParamId,
    /// (d_out, rank) up-projection, zero init.
    pub b: ParamId,
    pub rank: usize,
    pub scale: f64,
}

impl LoraAdapter {
    /// Load the adapter onto a tape in the form `linear_adapted` expects.
    pub fn on_tape(&self, tape: &mut Tape, ps: &ParamSet) -> (TensorId, TensorId, f64) {
        let a = tape.param(ps, self.a);
        let b = tape.param(ps, self.b);
        (a, b, self.scale)
    }
}

/// Trainable parameter count of one adapted map: `r * (d_in + d_out)`.
pub fn lora_param_count(rank: usize, d_in: usize, d_out: usize) -> usize {
    rank * (d_in + d_out)
}

/// Create a LoRA adapter for a (d_out, d_in) linear map.
pub fn lora_wrap(
    ps: &mut ParamSet,
    name: &str,
    d_out: usize,
    d_in: usize,
    rank: usize,
    alpha: f64,
    rng: &mut ChaCha8Rng,
) -> Result<LoraAdapter> {
    if rank == 0 || rank > d_in.min(d_out) {
        return Err(Error::InvalidConfig(format!(
            "LoRA rank {rank} must be in 1..=min({d_in}, {d_out})"
        )));
    }
    let a = ps.add_normal(format!("{name}.a"), rank, d_in, 0.02, rng);
    let b = ps.add_zeros(format!("{name}.b"), d_out, rank);
    Ok(LoraAdapter {
        a,
        b,
        rank,
        scale: alpha / rank as f64,
    })
}

/// Adapters for one transformer layer (applied to the Q and V projections).
#[derive(Debug, Clone)]
pub struct LayerAdapters {
    pub q: LoraAdapter,
    pub v: LoraAdapter,
}

/// Adapters for every transformer layer of one encoder branch.
#[derive(Debug, Clone)]
pub struct EncoderLora {
    pub layers: Vec<LayerAdapters>,
}

/// Default adapter rank and alpha for the fine-tuning ablations.
pub const LORA_RANK: usize = 4;
pub const LORA_ALPHA: f64 = 8.0;

/// Attach rank-`rank` adapters to the Q/V projections of every transformer
/// layer under `prefix` (must match the branch's parameter prefix so the
/// freeze policy can address them).
pub fn attach_lora(
    ps: &mut ParamSet,
    prefix: &str,
    cfg: &EncoderConfig,
    rank: usize,
    alpha: f64,
    rng: &mut ChaCha8Rng,
) -> Result<EncoderLora> {
    let d = cfg.d_model;
    let mut layers = Vec::new();
    for l in 0..cfg.n_layers {
        layers.push(LayerAdapters {
            q: lora_wrap(ps, &format!("{prefix}lora{l}.q"), d, d, rank, alpha, rng)?,
            v: lora_wrap(ps, &format!("{prefix}lora{l}.v"), d, d, rank, alpha, rng)?,
        });
    }
    Ok(EncoderLora { layers })
}

/// Projection into the shared fusion space: dropout(GELU(W h + b)).
pub fn project_branch(
    tape: &mut Tape,
    ps: &ParamSet,
    h: TensorId,
    w: ParamId,
    b: ParamId,
    dropout: f64,
    rng: &mut ChaCha8Rng,
) -> TensorId {
    let tw = tape.param(ps, w);
    let tb = tape.param(ps, b);
    let z = tape.linear(h, tw, tb);
    let a = tape.gelu(z);
    tape.dropout(a, dropout, rng)
}

/// Strategy-specific fusion parameters.
#[derive(Debug, Clone)]
pub enum FusionParams {
    Concat,
    Attention {
        w1: ParamId,
        b1: ParamId,
        w2: ParamId,
        b2: ParamId,
    },
    Gated {
        w: ParamId,
        b: ParamId,
    },
    Mha {
        wq: ParamId,
        bq: ParamId,
        wk: ParamId,
        bk: ParamId,
        wv: ParamId,
        bv: ParamId,
        wo: ParamId,
        bo: ParamId,
    },
}

impl FusionParams {
    /// Register fusion parameters under the `fusion.` prefix.
    ///
    /// Gate and score layers start at zero so both fusions begin as the
    /// symmetric average of the branches; the MHA projections are random
    /// (zero would make the whole block output zero and kill its gradient).
    pub fn init(ps: &mut ParamSet, cfg: &FusionConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let p = cfg.proj_dim;
        Ok(match cfg.strategy {
            FusionStrategy::Concat => FusionParams::Concat,
            FusionStrategy::Attention => {
                let hidden = (p / 2).max(1);
                let std = 1.0 / libm::sqrt(p as f64);
                FusionParams::Attention {
                    w1: ps.add_normal("fusion.attn.w1", hidden, p, std, rng),
                    b1: ps.add_zeros("fusion.attn.b1", 1, hidden),
                    w2: ps.add_zeros("fusion.attn.w2", 1, hidden),
                    b2: ps.add_zeros("fusion.attn.b2", 1, 1),
                }
            }
            FusionStrategy::Gated => FusionParams::Gated {
                w: ps.add_zeros("fusion.gate.w", p, 2 * p),
                b: ps.add_zeros("fusion.gate.b", 1, p),
            },
            FusionStrategy::Mha => {
                let std = 1.0 / libm::sqrt(p as f64);
                FusionParams::Mha {
                    wq: ps.add_normal("fusion.mha.wq", p, p, std, rng),
                    bq: ps.add_zeros("fusion.mha.bq", 1, p),
                    wk: ps.add_normal("fusion.mha.wk", p, p, std, rng),
                    bk: ps.add_zeros("fusion.mha.bk", 1, p),
                    wv: ps.add_normal("fusion.mha.wv", p, p, std, rng),
                    bv: ps.add_zeros("fusion.mha.bv", 1, p),
                    wo: ps.add_normal("fusion.mha.wo", p, p, std, rng),
                    bo: ps.add_zeros("fusion.mha.bo", 1, p),
                }
            }
        })
    }
}

/// Fuse two projected (1, proj_dim) embeddings.
pub fn fuse(
    tape: &mut Tape,
    ps: &ParamSet,
    h1: TensorId,
    h2: TensorId,
    cfg: &FusionConfig,
    params: &FusionParams,
) -> Result<TensorId> {
    if tape.cols(h1) != tape.cols(h2) || tape.rows(h1) != 1 || tape.rows(h2) != 1 {
        return Err(Error::ShapeMismatch(format!(
            "fuse expects two 1x{} rows, got {}x{} and {}x{}",
            cfg.proj_dim,
            tape.rows(h1),
            tape.cols(h1),
            tape.rows(h2),
            tape.cols(h2)
        )));
    }
    Ok(match params {
        FusionParams::Concat => tape.concat_cols(&[h1, h2]),
        FusionParams::Attention { w1, b1, w2, b2 } => {
            let tw1 = tape.param(ps, *w1);
            let tb1 = tape.param(ps, *b1);
            let tw2 = tape.param(ps, *w2);
            let tb2 = tape.param(ps, *b2);
            let score = |tape: &mut Tape, h: TensorId| {
                let z = tape.linear(h, tw1, tb1);
                let a = tape.tanh(z);
                tape.linear(a, tw2, tb2) // (1, 1)
            };
            let s1 = score(tape, h1);
            let s2 = score(tape, h2);
            let scores = tape.concat_cols(&[s1, s2]); // (1, 2)
            let weights = tape.softmax_rows(scores);
            let stacked = tape.concat_rows(&[h1, h2]); // (2, p)
            tape.matmul(weights, stacked) // (1, p)
        }
        FusionParams::Gated { w, b } => {
            let cat = tape.concat_cols(&[h1, h2]);
            let tw = tape.param(ps, *w);
            let tb = tape.param(ps, *b);
            let z = tape.linear(cat, tw, tb);
            let gate = tape.sigmoid(z);
            let inv_gate = tape.affine(gate, -1.0, 1.0);
            let a = tape.mul(gate, h1);
            let bb = tape.mul(inv_gate, h2);
            tape.add(a, bb)
        }
        FusionParams::Mha {
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
        } => {
            let seq = tape.concat_rows(&[h1, h2]); // length-2 sequence
            let w = MhaWeights {
                wq: tape.param(ps, *wq),
                bq: tape.param(ps, *bq),
                wk: tape.param(ps, *wk),
                bk: tape.param(ps, *bk),
                wv: tape.param(ps, *wv),
                bv: tape.param(ps, *bv),
                wo: tape.param(ps, *wo),
                bo: tape.param(ps, *bo),
            };
            let out = multi_head_attention(tape, seq, &w, cfg.mha_heads, None, None, None)?;
            tape.mean_pool_masked(out.out, &[true, true])?
        }
    })
}

/// Final linear map to two-way logits (index 1 = validate).
pub fn classify(tape: &mut Tape, ps: &ParamSet, fused: TensorId, w: ParamId, b: ParamId) -> TensorId {
    let tw = tape.param(ps, w);
    let tb = tape.param(ps, b);
    tape.linear(fused, tw, tb)
}

/// Which branches the timing model runs (single-branch variants are the
/// ablation baselines).
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchSelect {
    Both,
    ParaOnly,
    EmoOnly,
}

/// One encoder branch of the timing model plus its projection.
#[derive(Debug, Clone)]
pub struct TimingBranch {
    pub encoder: EncoderParams,
    pub lora: Option<EncoderLora>,
    pub proj_w: ParamId,
    pub proj_b: ParamId,
}

/// The full validation-timing classifier.
pub struct TimingModel {
    pub select: BranchSelect,
    pub para: Option<TimingBranch>,
    pub emo: Option<TimingBranch>,
    pub fusion: FusionParams,
    pub cls_w: ParamId,
    pub cls_b: ParamId,
}

impl TimingModel {
    /// Register all parameters. Branch encoders are created under the
    /// `para.` / `emo.` prefixes (their values are typically overwritten
    /// from stage checkpoints afterwards); projections live under `proj.`,
    /// fusion under `fusion.`, and the zero-initialized classifier under
    /// `cls.`.
    pub fn init(
        ps: &mut ParamSet,
        enc_cfg: &EncoderConfig,
        fusion_cfg: &FusionConfig,
        select: BranchSelect,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        fusion_cfg.validate()?;
        let p = fusion_cfg.proj_dim;
        let std = 1.0 / libm::sqrt(enc_cfg.d_model as f64);
        let branch = |ps: &mut ParamSet, name: &str, rng: &mut ChaCha8Rng| -> Result<TimingBranch> {
            let encoder = EncoderParams::init(ps, &format!("{name}."), enc_cfg, rng)?;
            Ok(TimingBranch {
                encoder,
                lora: None,
                proj_w: ps.add_normal(format!("proj.{name}.w"), p, enc_cfg.d_model, std, rng),
                proj_b: ps.add_zeros(format!("proj.{name}.b"), 1, p),
            })
        };
        let para = match select {
            BranchSelect::Both | BranchSelect::ParaOnly => Some(branch(ps, "para", rng)?),
            BranchSelect::EmoOnly => None,
        };
        let emo = match select {
            BranchSelect::Both | BranchSelect::EmoOnly => Some(branch(ps, "emo", rng)?),
            BranchSelect::ParaOnly => None,
        };
        let fusion = FusionParams::init(ps, fusion_cfg, rng)?;
        let cls_dim = match select {
            BranchSelect::Both => fusion_cfg.fused_dim(),
            _ => p,
        };
        Ok(Self {
            select,
            para,
            emo,
            fusion,
            cls_w: ps.add_zeros("cls.w", 2, cls_dim),
            cls_b: ps.add_zeros("cls.b", 1, 2),
        })
    }

    /// Forward one utterance to (1, 2) logits.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &mut Tape,
        ps: &ParamSet,
        enc_cfg: &EncoderConfig,
        fusion_cfg: &FusionConfig,
        samples: &[f64],
        valid_raw_len: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<TensorId> {
        let run_branch = |tape: &mut Tape, rng: &mut ChaCha8Rng, b: &TimingBranch| -> Result<TensorId> {
            let opts = EncodeOpts {
                mask_replace: None,
                lora: b.lora.as_ref(),
            };
            let out = encode(tape, ps, &b.encoder, enc_cfg, samples, valid_raw_len, &opts, rng)?;
            let pooled = tape.mean_pool_masked(out.states, &out.valid)?;
            Ok(project_branch(
                tape,
                ps,
                pooled,
                b.proj_w,
                b.proj_b,
                fusion_cfg.dropout,
                rng,
            ))
        };
        let fused = match self.select {
            BranchSelect::Both => {
                let h1 = run_branch(tape, rng, self.para.as_ref().unwrap())?;
                let h2 = run_branch(tape, rng, self.emo.as_ref().unwrap())?;
                fuse(tape, ps, h1, h2, fusion_cfg, &self.fusion)?
            }
            BranchSelect::ParaOnly => run_branch(tape, rng, self.para.as_ref().unwrap())?,
            BranchSelect::EmoOnly => run_branch(tape, rng, self.emo.as_ref().unwrap())?,
        };
        Ok(classify(tape, ps, fused, self.cls_w, self.cls_b))
    }
}

/// Apply per-branch training policies. Branch parameters (prefix `para.` /
/// `emo.`) are frozen or opened according to the policy; LoRA adapters (the
/// branch's `*.lora*` names) stay trainable under the `lora` policy;
/// projections, fusion and classifier parameters are always trainable.
pub fn apply_freeze_policy(
    ps: &mut ParamSet,
    policy_para: BranchPolicy,
    policy_emo: BranchPolicy,
) -> Vec<String> {
    for (prefix, policy) in [("para.", policy_para), ("emo.", policy_emo)] {
        match policy {
            BranchPolicy::Finetune => {
                ps.set_trainable_by_prefix(prefix, true);
            }
            BranchPolicy::Freeze => {
                ps.set_trainable_by_prefix(prefix, false);
            }
            BranchPolicy::Lora => {
                ps.set_trainable_by_prefix(prefix, false);
                ps.set_trainable_by_prefix(&format!("{prefix}lora"), true);
            }
        }
    }
    for prefix in ["proj.", "fusion.", "cls."] {
        ps.set_trainable_by_prefix(prefix, true);
    }
    ps.trainable_names()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::tape::Phase;

    fn tiny_fusion_cfg(strategy: FusionStrategy) -> FusionConfig {
        FusionConfig {
            strategy,
            proj_dim: 8,
            dropout: 0.0,
            mha_heads: 4,
        }
    }

    fn row(tape: &mut Tape, vals: &[f64]) -> TensorId {
        tape.leaf(1, vals.len(), vals.to_vec())
    }

    #[test]
    fn concat_keeps_blocks_in_order() {
        let cfg = tiny_fusion_cfg(FusionStrategy::Concat);
        let mut ps = ParamSet::new();
        let mut r = rng::stream(0, &[0]);
        let params = FusionParams::init(&mut ps, &cfg, &mut r).unwrap();
        let mut tape = Tape::new(Phase::Eval);
        let h1 = row(&mut tape, &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let h2 = row(&mut tape, &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let out = fuse(&mut tape, &ps, h1, h2, &cfg, &params).unwrap();
        assert_eq!(tape.cols(out), 16);
        assert_eq!(&tape.values(out)[..8], tape.values(h1));
        assert_eq!(&tape.values(out)[8..], tape.values(h2));
    }

    #[test]
    fn zero_init_gate_and_scores_average_the_branches() {
        let mut r = rng::stream(1, &[0]);
        for strategy in [FusionStrategy::Gated, FusionStrategy::Attention] {
            let cfg = tiny_fusion_cfg(strategy);
            let mut ps = ParamSet::new();
            let params = FusionParams::init(&mut ps, &cfg, &mut r).unwrap();
            let mut tape = Tape::new(Phase::Eval);
            let a: Vec<f64> = (0..8).map(|_| rng::normal(&mut r)).collect();
            let b: Vec<f64> = (0..8).map(|_| rng::normal(&mut r)).collect();
            let h1 = row(&mut tape, &a);
            let h2 = row(&mut tape, &b);
            let out = fuse(&mut tape, &ps, h1, h2, &cfg, &params).unwrap();
            assert_eq!(tape.cols(out), 8);
            for ((x, y), o) in a.iter().zip(&b).zip(tape.values(out)) {
                assert!((o - 0.5 * (x + y)).abs() < 1e-12, "strategy {strategy:?}");
            }
            // Exchange covariance at symmetric parameters.
            let swapped = fuse(&mut tape, &ps, h2, h1, &cfg, &params).unwrap();
            let fwd = tape.values(out).to_vec();
            for (s, f) in tape.values(swapped).iter().zip(&fwd) {
                assert!((s - f).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn all_strategies_emit_finite_documented_dims() {
        let mut r = rng::stream(2, &[0]);
        for strategy in FusionStrategy::ALL {
            let cfg = tiny_fusion_cfg(strategy);
            let mut ps = ParamSet::new();
            let params = FusionParams::init(&mut ps, &cfg, &mut r).unwrap();
            let mut tape = Tape::new(Phase::Eval);
            let a: Vec<f64> = (0..8).map(|_| rng::normal(&mut r)).collect();
            let b: Vec<f64> = (0..8).map(|_| rng::normal(&mut r)).collect();
            let h1 = row(&mut tape, &a);
            let h2 = row(&mut tape, &b);
            let out = fuse(&mut tape, &ps, h1, h2, &cfg, &params).unwrap();
            assert_eq!(tape.cols(out), cfg.fused_dim());
            assert!(tape.values(out).iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn fuse_rejects_mismatched_dims() {
        let cfg = tiny_fusion_cfg(FusionStrategy::Concat);
        let mut ps = ParamSet::new();
        let mut r = rng::stream(3, &[0]);
        let params = FusionParams::init(&mut ps, &cfg, &mut r).unwrap();
        let mut tape = Tape::new(Phase::Eval);
        let h1 = row(&mut tape, &[0.0; 8]);
        let h2 = row(&mut tape, &[0.0; 6]);
        assert!(fuse(&mut tape, &ps, h1, h2, &cfg, &params).is_err());
    }

    #[test]
    fn classifier_is_a_plain_linear_map_with_shift_invariant_argmax() {
        let mut ps = ParamSet::new();
        let w = ps.add_zeros("cls.w", 2, 4);
        let b = ps.add("cls.b", 1, 2, vec![0.3, -0.2]);
        let mut tape = Tape::new(Phase::Eval);
        let x = row(&mut tape, &[0.0; 4]);
        let logits = classify(&mut tape, &ps, x, w, b);
        assert_eq!(tape.values(logits), &[0.3, -0.2]);
        // Adding a constant to both logits cannot change the argmax.
        let shifted = tape.affine(logits, 1.0, 5.0);
        let a = tape.values(logits);
        let s = tape.values(shifted);
        assert_eq!(a[0] > a[1], s[0] > s[1]);
    }

    #[test]
    fn lora_wrap_validates_rank_and_counts_params() {
        let mut ps = ParamSet::new();
        let mut r = rng::stream(4, &[0]);
        assert!(lora_wrap(&mut ps, "x", 8, 8, 0, 8.0, &mut r).is_err());
        assert!(lora_wrap(&mut ps, "x", 8, 4, 5, 8.0, &mut r).is_err());
        let ad = lora_wrap(&mut ps, "enc.lora0.q", 8, 6, 2, 8.0, &mut r).unwrap();
        assert_eq!(ad.scale, 4.0);
        let n = ps.get(ad.a).values.len() + ps.get(ad.b).values.len();
        assert_eq!(n, lora_param_count(2, 6, 8));
        assert!(ps.get(ad.b).values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn freeze_policies_select_the_documented_trainable_sets() {
        let enc_cfg = EncoderConfig {
            conv_stack: vec![(4, 2)],
            conv_channels: vec![8],
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            ffn_dim: 16,
            dropout: 0.0,
        };
        let fusion_cfg = tiny_fusion_cfg(FusionStrategy::Concat);
        let mut r = rng::stream(5, &[0]);
        let mut ps = ParamSet::new();
        let mut model =
            TimingModel::init(&mut ps, &enc_cfg, &fusion_cfg, BranchSelect::Both, &mut r).unwrap();

        // (freeze, freeze): only projections + fusion + classifier remain.
        let names = apply_freeze_policy(&mut ps, BranchPolicy::Freeze, BranchPolicy::Freeze);
        assert!(names.iter().all(|n| n.starts_with("proj.")
            || n.starts_with("fusion.")
            || n.starts_with("cls.")));
        assert!(!names.is_empty());

        // (finetune, lora): full para params, emo adapters only, plus heads.
        model.emo.as_mut().unwrap().lora =
            Some(attach_lora(&mut ps, "emo.", &enc_cfg, 2, 4.0, &mut r).unwrap());
        let names = apply_freeze_policy(&mut ps, BranchPolicy::Finetune, BranchPolicy::Lora);
        assert!(names.iter().any(|n| n.starts_with("para.conv0")));
        assert!(names.iter().any(|n| n.starts_with("emo.lora0.q")));
        assert!(!names.iter().any(|n| n.starts_with("emo.conv0")));
        assert!(names.iter().any(|n| n.starts_with("cls.")));
    }

    #[test]
    fn lora_policy_at_step_zero_equals_freeze_policy_on_forward() {
        let enc_cfg = EncoderConfig {
            conv_stack: vec![(10, 5)],
            conv_channels: vec![8],
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            ffn_dim: 16,
            dropout: 0.0,
        };
        let fusion_cfg = FusionConfig {
            proj_dim: 8,
            dropout: 0.0,
            mha_heads: 2,
            strategy: FusionStrategy::Concat,
        };
        let mut r = rng::stream(6, &[0]);
        let mut ps = ParamSet::new();
        let mut model =
            TimingModel::init(&mut ps, &enc_cfg, &fusion_cfg, BranchSelect::Both, &mut r).unwrap();
        let mut data = rng::stream(7, &[0]);
        let samples: Vec<f64> = (0..200).map(|_| 0.3 * rng::normal(&mut data)).collect();

        let run = |ps: &ParamSet, model: &TimingModel| {
            let mut tape = Tape::new(Phase::Eval);
            let mut fr = rng::stream(8, &[0]);
            let logits = model
                .forward(&mut tape, ps, &enc_cfg, &fusion_cfg, &samples, 200, &mut fr)
                .unwrap();
            tape.values(logits).to_vec()
        };
        let frozen = run(&ps, &model);
        model.para.as_mut().unwrap().lora =
            Some(attach_lora(&mut ps, "para.", &enc_cfg, 2, 4.0, &mut r).unwrap());
        let with_lora = run(&ps, &model);
        for (a, b) in frozen.iter().zip(&with_lora) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
