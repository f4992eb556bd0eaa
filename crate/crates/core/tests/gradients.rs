//! Central finite-difference verification of every differentiable primitive
//! and of the composed models. The numerical oracle only ever uses the
//! forward pass, so it is independent of the backward implementation it
//! checks.

use valtime_core::emotion::{mtl_forward, mtl_loss, MtlModel};
use valtime_core::encoder::{encode, EncodeOpts, EncoderConfig};
use valtime_core::fusion::{attach_lora, BranchPolicy, BranchSelect, FusionConfig, FusionStrategy, TimingModel};
use valtime_core::params::{ParamId, ParamSet};
use valtime_core::rng;
use valtime_core::ssl::{sample_span_masks, ssl_step, SslModel};
use valtime_core::tape::{multi_head_attention, MhaWeights, Phase, Tape, TensorId};
use valtime_core::units::UnitSequence;
use valtime_core::ChaCha8Rng;

const FD_STEP: f64 = 1e-5;
const FD_TOL: f64 = 1e-4;

/// Relative error with a floor so gradients below finite-difference
/// resolution compare on absolute terms.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Check the analytic gradient of `loss(ps)` for up to `coords_per_param`
/// random coordinates of every trainable parameter.
fn check_grads(
    ps: &mut ParamSet,
    mut loss: impl FnMut(&ParamSet) -> (f64, Vec<(usize, Vec<f64>)>),
    coords_per_param: usize,
    seed: u64,
    label: &str,
) {
    let (_, grads) = loss(ps);
    let mut coord_rng = rng::stream(seed, &[0xfd]);
    let mut checked = 0usize;
    for (idx, grad) in &grads {
        let pid = ps.id_at(*idx);
        let n = grad.len();
        for _ in 0..coords_per_param.min(n) {
            let j = rng::index(&mut coord_rng, n);
            let orig = ps.get(pid).values[j];
            ps.get_mut(pid).values[j] = orig + FD_STEP;
            let (up, _) = loss(ps);
            ps.get_mut(pid).values[j] = orig - FD_STEP;
            let (down, _) = loss(ps);
            ps.get_mut(pid).values[j] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let analytic = grad[j];
            let e = rel_err(analytic, numeric);
            assert!(
                e < FD_TOL,
                "{label}: param {idx} coord {j}: analytic {analytic:.8e} vs numeric {numeric:.8e} (rel {e:.2e})"
            );
            checked += 1;
        }
    }
    assert!(checked > 0, "{label}: nothing checked");
}

fn rand_vals(n: usize, scale: f64, r: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| scale * rng::normal(r)).collect()
}

/// Reduce an (m, n) tensor to a scalar with a fixed random functional, so
/// every output coordinate influences the loss.
fn readout(tape: &mut Tape, x: TensorId, r: &mut ChaCha8Rng) -> TensorId {
    let (m, n) = (tape.rows(x), tape.cols(x));
    let probe = tape.leaf(n, 1, rand_vals(n, 1.0, r));
    let col = tape.matmul(x, probe); // (m, 1)
    let pool = tape.mean_pool_masked(col, &vec![true; m]).unwrap();
    // 1x1 already when n==1; ensure scalar by pooling the column.
    assert_eq!(tape.rows(pool), 1);
    assert_eq!(tape.cols(pool), 1);
    pool
}

#[test]
fn primitive_ops_pass_finite_difference_checks() {
    for seed in 0..10u64 {
        let mut shape_rng = rng::stream(seed, &[100]);
        let m = 2 + rng::index(&mut shape_rng, 3);
        let n = 2 + rng::index(&mut shape_rng, 4);
        let k = 1 + rng::index(&mut shape_rng, 3);

        // Elementwise + reductions + shape ops, one graph per op family.
        type Builder = fn(&mut Tape, TensorId, TensorId, &mut ChaCha8Rng) -> TensorId;
        let builders: Vec<(&str, Builder)> = vec![
            ("add", |t, a, b, _| t.add(a, b)),
            ("sub", |t, a, b, _| t.sub(a, b)),
            ("mul", |t, a, b, _| t.mul(a, b)),
            ("affine", |t, a, _, _| t.affine(a, -1.7, 0.3)),
            ("gelu", |t, a, _, _| t.gelu(a)),
            ("tanh", |t, a, _, _| t.tanh(a)),
            ("sigmoid", |t, a, _, _| t.sigmoid(a)),
            ("softmax", |t, a, _, _| t.softmax_rows(a)),
            ("transpose", |t, a, _, _| t.transpose(a)),
            ("slice", |t, a, _, _| {
                let c = t.cols(a);
                t.slice_cols(a, 1, c - 1)
            }),
            ("concat_cols", |t, a, b, _| t.concat_cols(&[a, b])),
            ("concat_rows", |t, a, b, _| t.concat_rows(&[a, b])),
            ("pool", |t, a, _, _| {
                let m = t.rows(a);
                let mut mask = vec![true; m];
                if m > 1 {
                    mask[m - 1] = false;
                }
                t.mean_pool_masked(a, &mask).unwrap()
            }),
            ("dropout", |t, a, _, r| t.dropout(a, 0.3, r)),
        ];
        for (name, build) in builders {
            let mut init = rng::stream(seed, &[1, name.len() as u64]);
            let mut ps = ParamSet::new();
            let a = ps.add("a", m, n, rand_vals(m * n, 1.0, &mut init));
            let b = ps.add("b", m, n, rand_vals(m * n, 1.0, &mut init));
            let loss = |ps: &ParamSet| {
                let mut tape = Tape::new(Phase::Train);
                let mut op_rng = rng::stream(seed, &[2]);
                let ta = tape.param(ps, a);
                let tb = tape.param(ps, b);
                let y = build(&mut tape, ta, tb, &mut op_rng);
                let mut read_rng = rng::stream(seed, &[3]);
                let l = readout(&mut tape, y, &mut read_rng);
                tape.backward(l).unwrap();
                (tape.scalar(l), tape.param_grads())
            };
            check_grads(&mut ps, loss, 3, seed, name);
        }

        // matmul / add_rowvec / layer_norm / replace_masked_rows need their
        // own shapes.
        let mut init = rng::stream(seed, &[4]);
        let mut ps = ParamSet::new();
        let a = ps.add("a", m, k, rand_vals(m * k, 1.0, &mut init));
        let b = ps.add("b", k, n, rand_vals(k * n, 1.0, &mut init));
        let v = ps.add("v", 1, n, rand_vals(n, 1.0, &mut init));
        let g = ps.add("g", 1, n, rand_vals(n, 0.3, &mut init));
        let be = ps.add("be", 1, n, rand_vals(n, 0.3, &mut init));
        let emb = ps.add("emb", 1, n, rand_vals(n, 1.0, &mut init));
        let loss = |ps: &ParamSet| {
            let mut tape = Tape::new(Phase::Eval);
            let ta = tape.param(ps, a);
            let tb = tape.param(ps, b);
            let tv = tape.param(ps, v);
            let tg = tape.param(ps, g);
            let tbe = tape.param(ps, be);
            let temb = tape.param(ps, emb);
            let mm = tape.matmul(ta, tb);
            let biased = tape.add_rowvec(mm, tv);
            let normed = tape.layer_norm(biased, tg, tbe, 1e-5);
            let mut mask = vec![false; m];
            mask[0] = true;
            let replaced = tape.replace_masked_rows(normed, temb, &mask);
            let mut read_rng = rng::stream(seed, &[5]);
            let l = readout(&mut tape, replaced, &mut read_rng);
            tape.backward(l).unwrap();
            (tape.scalar(l), tape.param_grads())
        };
        check_grads(&mut ps, loss, 3, seed, "matmul+rowvec+layernorm+replace");

        // conv1d.
        let mut init = rng::stream(seed, &[6]);
        let (t_in, c_in, c_out, kernel, stride) = (11 + rng::index(&mut init, 6), 2, 3, 4, 2);
        let mut ps = ParamSet::new();
        let x = ps.add("x", t_in, c_in, rand_vals(t_in * c_in, 1.0, &mut init));
        let w = ps.add("w", c_out, kernel * c_in, rand_vals(c_out * kernel * c_in, 0.5, &mut init));
        let bb = ps.add("b", 1, c_out, rand_vals(c_out, 0.3, &mut init));
        let loss = |ps: &ParamSet| {
            let mut tape = Tape::new(Phase::Eval);
            let tx = tape.param(ps, x);
            let tw = tape.param(ps, w);
            let tb = tape.param(ps, bb);
            let y = tape.conv1d(tx, tw, tb, kernel, stride);
            let act = tape.gelu(y);
            let mut read_rng = rng::stream(seed, &[7]);
            let l = readout(&mut tape, act, &mut read_rng);
            tape.backward(l).unwrap();
            (tape.scalar(l), tape.param_grads())
        };
        check_grads(&mut ps, loss, 4, seed, "conv1d");

        // cross_entropy with weights and an ignored row.
        let mut init = rng::stream(seed, &[8]);
        let (rows, classes) = (4, 3);
        let mut ps = ParamSet::new();
        let z = ps.add("z", rows, classes, rand_vals(rows * classes, 1.0, &mut init));
        let targets = [0usize, classes, 2, 1]; // one ignored sentinel
        let weights = [1.5, 0.7, 1.0];
        let loss = |ps: &ParamSet| {
            let mut tape = Tape::new(Phase::Eval);
            let tz = tape.param(ps, z);
            let l = tape
                .cross_entropy(tz, &targets, Some(&weights), Some(classes))
                .unwrap();
            tape.backward(l).unwrap();
            (tape.scalar(l), tape.param_grads())
        };
        check_grads(&mut ps, loss, 6, seed, "cross_entropy");
    }
}

#[test]
fn multi_head_attention_matches_finite_differences() {
    for seed in 0..10u64 {
        let mut init = rng::stream(seed, &[10]);
        let d = 8;
        let l = 2 + rng::index(&mut init, 3);
        let mut ps = ParamSet::new();
        let x = ps.add("x", l, d, rand_vals(l * d, 1.0, &mut init));
        let names = ["wq", "wk", "wv", "wo"];
        let ws: Vec<ParamId> = names
            .iter()
            .map(|n| ps.add(*n, d, d, rand_vals(d * d, 0.4, &mut init)))
            .collect();
        let bs: Vec<ParamId> = names
            .iter()
            .map(|n| ps.add(format!("b{n}"), 1, d, rand_vals(d, 0.2, &mut init)))
            .collect();
        let mut mask = vec![0.0; l];
        if l > 2 {
            mask[l - 1] = valtime_core::tape::ATTN_MASK_NEG;
        }
        let loss = |ps: &ParamSet| {
            let mut tape = Tape::new(Phase::Eval);
            let tx = tape.param(ps, x);
            let w = MhaWeights {
                wq: tape.param(ps, ws[0]),
                bq: tape.param(ps, bs[0]),
                wk: tape.param(ps, ws[1]),
                bk: tape.param(ps, bs[1]),
                wv: tape.param(ps, ws[2]),
                bv: tape.param(ps, bs[2]),
                wo: tape.param(ps, ws[3]),
                bo: tape.param(ps, bs[3]),
            };
            let out = multi_head_attention(&mut tape, tx, &w, 4, Some(&mask), None, None).unwrap();
            let mut read_rng = rng::stream(seed, &[11]);
            let l = readout(&mut tape, out.out, &mut read_rng);
            tape.backward(l).unwrap();
            (tape.scalar(l), tape.param_grads())
        };
        check_grads(&mut ps, loss, 3, seed, "multi_head_attention");
    }
}

fn tiny_encoder_cfg() -> EncoderConfig {
    EncoderConfig {
        conv_stack: vec![(10, 5), (4, 2)],
        conv_channels: vec![4, 8],
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        ffn_dim: 16,
        dropout: 0.0,
    }
}

#[test]
fn encoder_end_to_end_gradients() {
    let cfg = tiny_encoder_cfg();
    for seed in 0..10u64 {
        let mut init = rng::stream(seed, &[20]);
        let mut ps = ParamSet::new();
        let enc = valtime_core::encoder::EncoderParams::init(&mut ps, "enc.", &cfg, &mut init).unwrap();
        let samples = rand_vals(90, 0.4, &mut init);
        let loss = |ps: &ParamSet| {
            let mut tape = Tape::new(Phase::Eval);
            let mut fr = rng::stream(seed, &[21]);
            let out = encode(&mut tape, ps, &enc, &cfg, &samples, 90, &EncodeOpts::default(), &mut fr).unwrap();
            let mut read_rng = rng::stream(seed, &[22]);
            let l = readout(&mut tape, out.states, &mut read_rng);
            tape.backward(l).unwrap();
            (tape.scalar(l), tape.param_grads())
        };
        check_grads(&mut ps, loss, 2, seed, "encoder");
    }
}

#[test]
fn ssl_objective_gradients_including_mask_embedding() {
    let cfg = tiny_encoder_cfg();
    for seed in 0..10u64 {
        let mut init = rng::stream(seed, &[30]);
        let mut ps = ParamSet::new();
        let model = SslModel::init(&mut ps, &cfg, 5, &mut init).unwrap();
        // Nudge the head off its zero init so its gradients are generic.
        for pid in [model.head.w, model.head.b] {
            let p = ps.get_mut(pid);
            let n = p.values.len();
            p.values.copy_from_slice(&rand_vals(n, 0.3, &mut init));
        }
        let samples = rand_vals(110, 0.4, &mut init);
        let t = valtime_core::encoder::feature_length(110, &cfg.conv_stack).unwrap();
        let mut mask_rng = rng::stream(seed, &[31]);
        let mask = sample_span_masks(t, 0.3, 3, &mut mask_rng);
        let units = UnitSequence {
            units: (0..t).map(|i| (i % 5) as u32).collect(),
            frame_rate: 100.0,
        };
        let loss = |ps: &ParamSet| {
            let mut tape = Tape::new(Phase::Eval);
            let mut fr = rng::stream(seed, &[32]);
            let l = ssl_step(&mut tape, ps, &model, &cfg, &samples, 110, &units, &mask, &mut fr).unwrap();
            tape.backward(l).unwrap();
            (tape.scalar(l), tape.param_grads())
        };
        check_grads(&mut ps, loss, 2, seed, "ssl_step");
    }
}

#[test]
fn mtl_heads_and_balance_gradients() {
    let cfg = tiny_encoder_cfg();
    for seed in 0..10u64 {
        let mut init = rng::stream(seed, &[40]);
        let mut ps = ParamSet::new();
        let model = MtlModel::init(&mut ps, &cfg, &mut init).unwrap();
        for pid in [
            model.heads.emotion_w,
            model.heads.emotion_b,
            model.heads.sentiment_w,
            model.heads.sentiment_b,
        ] {
            let p = ps.get_mut(pid);
            let n = p.values.len();
            p.values.copy_from_slice(&rand_vals(n, 0.3, &mut init));
        }
        ps.get_mut(model.heads.alpha_logit).values[0] = 0.4;
        let samples = rand_vals(100, 0.4, &mut init);
        let weights = [1.3, 0.8, 1.0, 1.0, 0.9, 1.2, 1.0];
        let (e_target, s_target) = (seed as usize % 7, seed as usize % 3);
        let loss = |ps: &ParamSet| {
            let mut tape = Tape::new(Phase::Eval);
            let mut fr = rng::stream(seed, &[41]);
            let fwd = mtl_forward(&mut tape, ps, &model, &cfg, &samples, 100, &mut fr).unwrap();
            let alpha = tape.param(ps, model.heads.alpha_logit);
            let l = mtl_loss(
                &mut tape,
                fwd.emotion_logits,
                &[e_target],
                &weights,
                fwd.sentiment_logits,
                &[s_target],
                alpha,
            )
            .unwrap();
            tape.backward(l).unwrap();
            (tape.scalar(l), tape.param_grads())
        };
        check_grads(&mut ps, loss, 2, seed, "mtl");
    }
}

#[test]
fn all_fusion_strategies_and_lora_gradients() {
    let enc_cfg = tiny_encoder_cfg();
    for (si, strategy) in FusionStrategy::ALL.into_iter().enumerate() {
        let fusion_cfg = FusionConfig {
            strategy,
            proj_dim: 8,
            dropout: 0.0,
            mha_heads: 2,
        };
        for seed in 0..10u64 {
            let mut init = rng::stream(seed, &[50 + si as u64]);
            let mut ps = ParamSet::new();
            let mut model =
                TimingModel::init(&mut ps, &enc_cfg, &fusion_cfg, BranchSelect::Both, &mut init).unwrap();
            // LoRA on the emotion branch; B nudged off zero so the adapter
            // path carries generic gradients.
            let lora = attach_lora(&mut ps, "emo.", &enc_cfg, 2, 4.0, &mut init).unwrap();
            for layer in &lora.layers {
                for pid in [layer.q.b, layer.v.b] {
                    let p = ps.get_mut(pid);
                    let n = p.values.len();
                    p.values.copy_from_slice(&rand_vals(n, 0.1, &mut init));
                }
            }
            model.emo.as_mut().unwrap().lora = Some(lora);
            // Classifier off zero init for generic gradients.
            for pid in [model.cls_w, model.cls_b] {
                let p = ps.get_mut(pid);
                let n = p.values.len();
                p.values.copy_from_slice(&rand_vals(n, 0.3, &mut init));
            }
            valtime_core::fusion::apply_freeze_policy(&mut ps, BranchPolicy::Finetune, BranchPolicy::Lora);
            let samples = rand_vals(95, 0.4, &mut init);
            let target = (seed % 2) as usize;
            let loss = |ps: &ParamSet| {
                let mut tape = Tape::new(Phase::Eval);
                let mut fr = rng::stream(seed, &[51]);
                let logits = model
                    .forward(&mut tape, ps, &enc_cfg, &fusion_cfg, &samples, 95, &mut fr)
                    .unwrap();
                let l = tape.cross_entropy(logits, &[target], None, None).unwrap();
                tape.backward(l).unwrap();
                (tape.scalar(l), tape.param_grads())
            };
            check_grads(&mut ps, loss, 2, seed, strategy.name());
        }
    }
}
