//! Reverse-mode automatic differentiation over dense f64 matrices.
//!
//! A [`Tape`] is an append-only graph of 2-D tensors (vectors are single-row
//! matrices, scalars are 1x1). Ops record enough forward state to run the
//! backward pass; `backward` seeds the scalar loss with gradient 1 and visits
//! every node exactly once in reverse creation order, accumulating gradients
//! additively across fan-out. Gradients are only materialized along paths
//! that reach a trainable leaf, so frozen subgraphs cost nothing on the way
//! back.
//!
//! Parameters live outside the tape in a [`ParamSet`]; [`Tape::param`] copies
//! the current values in as a leaf and records the binding so
//! [`Tape::param_grads`] can hand gradients back after `backward`.
//!
//! Losses and everything else accumulate in f64. Dropout behavior depends on
//! the tape's [`Phase`]: in `Eval` (or at rate 0) it is the identity.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::Error;
use crate::params::{ParamId, ParamSet};
use crate::{rng, ChaCha8Rng, Result};

/// Forward phase; controls dropout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

/// Handle to a tensor recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Affine { x: TensorId, mul: f64 },
    MatMul(TensorId, TensorId),
    Transpose(TensorId),
    AddRowVec { x: TensorId, v: TensorId },
    SliceCols { x: TensorId, start: usize },
    ConcatCols(Vec<TensorId>),
    ConcatRows(Vec<TensorId>),
    Conv1d {
        x: TensorId,
        w: TensorId,
        b: TensorId,
        kernel: usize,
        stride: usize,
    },
    Gelu(TensorId),
    Tanh(TensorId),
    Sigmoid(TensorId),
    SoftmaxRows(TensorId),
    LayerNormRows {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        /// Per-row (mean, 1/std) saved by the forward pass.
        stats: Vec<(f64, f64)>,
    },
    Dropout {
        x: TensorId,
        keep: Vec<bool>,
        scale: f64,
    },
    MeanPoolMasked {
        x: TensorId,
        mask: Vec<bool>,
        n_valid: usize,
    },
    ReplaceMaskedRows {
        x: TensorId,
        emb: TensorId,
        mask: Vec<bool>,
    },
    CrossEntropy {
        logits: TensorId,
        targets: Vec<usize>,
        /// Effective per-class weights (all ones when unweighted).
        weights: Vec<f64>,
        ignore: Option<usize>,
        /// Softmax rows for non-ignored samples, zeros elsewhere.
        probs: Vec<f64>,
        weight_sum: f64,
    },
}

struct Node {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
    needs_grad: bool,
    op: Op,
}

/// Recorded computation graph for one forward/backward pass.
pub struct Tape {
    nodes: Vec<Node>,
    phase: Phase,
    bindings: Vec<(TensorId, usize)>,
}

impl Tape {
    pub fn new(phase: Phase) -> Self {
        Self {
            nodes: Vec::new(),
            phase,
            bindings: Vec::new(),
        }
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn rows(&self, id: TensorId) -> usize {
        self.nodes[id.0].rows
    }

    pub fn cols(&self, id: TensorId) -> usize {
        self.nodes[id.0].cols
    }

    pub fn values(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].values
    }

    /// Value of a 1x1 tensor.
    pub fn scalar(&self, id: TensorId) -> f64 {
        let n = &self.nodes[id.0];
        assert!(n.rows == 1 && n.cols == 1, "scalar() on {}x{}", n.rows, n.cols);
        n.values[0]
    }

    /// Gradient of a tensor after `backward` (None when no gradient path
    /// reaches it).
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    fn push(&mut self, rows: usize, cols: usize, values: Vec<f64>, needs_grad: bool, op: Op) -> TensorId {
        debug_assert_eq!(values.len(), rows * cols);
        debug_assert!(values.iter().all(|v| v.is_finite()), "non-finite tensor");
        self.nodes.push(Node {
            rows,
            cols,
            values,
            grad: None,
            needs_grad,
            op,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn needs(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Data leaf; never receives a gradient.
    pub fn leaf(&mut self, rows: usize, cols: usize, values: Vec<f64>) -> TensorId {
        self.push(rows, cols, values, false, Op::Leaf)
    }

    /// Leaf that participates in differentiation (used by gradient checks).
    pub fn var(&mut self, rows: usize, cols: usize, values: Vec<f64>) -> TensorId {
        self.push(rows, cols, values, true, Op::Leaf)
    }

    /// Load a parameter as a leaf; trainability decides whether gradients
    /// flow to it. The binding is recorded for [`Tape::param_grads`].
    pub fn param(&mut self, ps: &ParamSet, id: ParamId) -> TensorId {
        let p = ps.get(id);
        let t = self.push(p.rows, p.cols, p.values.clone(), p.trainable, Op::Leaf);
        self.bindings.push((t, id.index()));
        t
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.assert_same_shape(a, b, "add");
        let values = self.zip_values(a, b, |x, y| x + y);
        let (r, c) = (self.rows(a), self.cols(a));
        let ng = self.needs(a) || self.needs(b);
        self.push(r, c, values, ng, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.assert_same_shape(a, b, "sub");
        let values = self.zip_values(a, b, |x, y| x - y);
        let (r, c) = (self.rows(a), self.cols(a));
        let ng = self.needs(a) || self.needs(b);
        self.push(r, c, values, ng, Op::Sub(a, b))
    }

    /// Elementwise product (same shapes).
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.assert_same_shape(a, b, "mul");
        let values = self.zip_values(a, b, |x, y| x * y);
        let (r, c) = (self.rows(a), self.cols(a));
        let ng = self.needs(a) || self.needs(b);
        self.push(r, c, values, ng, Op::Mul(a, b))
    }

    /// `mul * x + shift`, elementwise with constants.
    pub fn affine(&mut self, x: TensorId, mul: f64, shift: f64) -> TensorId {
        let values = self.nodes[x.0].values.iter().map(|v| mul * v + shift).collect();
        let (r, c) = (self.rows(x), self.cols(x));
        let ng = self.needs(x);
        self.push(r, c, values, ng, Op::Affine { x, mul })
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (m, k) = (self.rows(a), self.cols(a));
        let (k2, n) = (self.rows(b), self.cols(b));
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        matmul_acc(&self.nodes[a.0].values, &self.nodes[b.0].values, m, k, n, &mut out);
        let ng = self.needs(a) || self.needs(b);
        self.push(m, n, out, ng, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: TensorId) -> TensorId {
        let (m, n) = (self.rows(a), self.cols(a));
        let src = &self.nodes[a.0].values;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let ng = self.needs(a);
        self.push(n, m, out, ng, Op::Transpose(a))
    }

    /// Add a 1xN row vector to every row of an MxN matrix.
    pub fn add_rowvec(&mut self, x: TensorId, v: TensorId) -> TensorId {
        let (m, n) = (self.rows(x), self.cols(x));
        assert!(
            self.rows(v) == 1 && self.cols(v) == n,
            "add_rowvec: {}x{} + {}x{}",
            m,
            n,
            self.rows(v),
            self.cols(v)
        );
        let xv = &self.nodes[x.0].values;
        let vv = &self.nodes[v.0].values;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = xv[i * n + j] + vv[j];
            }
        }
        let ng = self.needs(x) || self.needs(v);
        self.push(m, n, out, ng, Op::AddRowVec { x, v })
    }

    /// Columns `start..start+len` of `x`.
    pub fn slice_cols(&mut self, x: TensorId, start: usize, len: usize) -> TensorId {
        let (m, n) = (self.rows(x), self.cols(x));
        assert!(start + len <= n, "slice_cols {start}+{len} > {n}");
        let src = &self.nodes[x.0].values;
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&src[i * n + start..i * n + start + len]);
        }
        let ng = self.needs(x);
        self.push(m, len, out, ng, Op::SliceCols { x, start })
    }

    /// Concatenate along columns (all parts share the row count).
    pub fn concat_cols(&mut self, parts: &[TensorId]) -> TensorId {
        assert!(!parts.is_empty());
        let m = self.rows(parts[0]);
        let total: usize = parts.iter().map(|&p| {
            assert_eq!(self.rows(p), m, "concat_cols row mismatch");
            self.cols(p)
        }).sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                let c = self.cols(p);
                out.extend_from_slice(&self.nodes[p.0].values[i * c..(i + 1) * c]);
            }
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(m, total, out, ng, Op::ConcatCols(parts.to_vec()))
    }

    /// Concatenate along rows (all parts share the column count).
    pub fn concat_rows(&mut self, parts: &[TensorId]) -> TensorId {
        assert!(!parts.is_empty());
        let n = self.cols(parts[0]);
        let total: usize = parts.iter().map(|&p| {
            assert_eq!(self.cols(p), n, "concat_rows col mismatch");
            self.rows(p)
        }).sum();
        let mut out = Vec::with_capacity(total * n);
        for &p in parts {
            out.extend_from_slice(&self.nodes[p.0].values);
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(total, n, out, ng, Op::ConcatRows(parts.to_vec()))
    }

    /// Strided 1-D convolution over time. `x` is (t_in, c_in) time-major,
    /// `w` is (c_out, kernel*c_in) with the window flattened time-major,
    /// `b` is (1, c_out). Output is (t_out, c_out) with
    /// `t_out = (t_in - kernel)/stride + 1`.
    pub fn conv1d(&mut self, x: TensorId, w: TensorId, b: TensorId, kernel: usize, stride: usize) -> TensorId {
        let (t_in, c_in) = (self.rows(x), self.cols(x));
        let (c_out, wk) = (self.rows(w), self.cols(w));
        assert_eq!(wk, kernel * c_in, "conv1d weight width");
        assert!(self.rows(b) == 1 && self.cols(b) == c_out, "conv1d bias shape");
        assert!(t_in >= kernel, "conv1d input shorter than kernel");
        assert!(stride >= 1);
        let t_out = (t_in - kernel) / stride + 1;
        let xv = &self.nodes[x.0].values;
        let wv = &self.nodes[w.0].values;
        let bv = &self.nodes[b.0].values;
        let win = kernel * c_in;
        let mut out = vec![0.0; t_out * c_out];
        for t in 0..t_out {
            let x_win = &xv[t * stride * c_in..t * stride * c_in + win];
            for co in 0..c_out {
                let wrow = &wv[co * win..(co + 1) * win];
                let dot: f64 = x_win.iter().zip(wrow).map(|(a, b)| a * b).sum();
                out[t * c_out + co] = dot + bv[co];
            }
        }
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(t_out, c_out, out, ng, Op::Conv1d { x, w, b, kernel, stride })
    }

    pub fn gelu(&mut self, x: TensorId) -> TensorId {
        let values = self.nodes[x.0].values.iter().map(|&v| gelu_f(v)).collect();
        let (r, c) = (self.rows(x), self.cols(x));
        let ng = self.needs(x);
        self.push(r, c, values, ng, Op::Gelu(x))
    }

    pub fn tanh(&mut self, x: TensorId) -> TensorId {
        let values = self.nodes[x.0].values.iter().map(|&v| libm::tanh(v)).collect();
        let (r, c) = (self.rows(x), self.cols(x));
        let ng = self.needs(x);
        self.push(r, c, values, ng, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: TensorId) -> TensorId {
        let values = self.nodes[x.0].values.iter().map(|&v| sigmoid_f(v)).collect();
        let (r, c) = (self.rows(x), self.cols(x));
        let ng = self.needs(x);
        self.push(r, c, values, ng, Op::Sigmoid(x))
    }

    /// Row-wise softmax (max-subtracted, so fully masked rows stay finite).
    pub fn softmax_rows(&mut self, x: TensorId) -> TensorId {
        let (m, n) = (self.rows(x), self.cols(x));
        let src = &self.nodes[x.0].values;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            softmax_row(&src[i * n..(i + 1) * n], &mut out[i * n..(i + 1) * n]);
        }
        let ng = self.needs(x);
        self.push(m, n, out, ng, Op::SoftmaxRows(x))
    }

    /// Row-wise layer normalization with learned gain/bias (1xN each).
    pub fn layer_norm(&mut self, x: TensorId, gamma: TensorId, beta: TensorId, eps: f64) -> TensorId {
        let (m, n) = (self.rows(x), self.cols(x));
        assert!(self.rows(gamma) == 1 && self.cols(gamma) == n, "layer_norm gamma shape");
        assert!(self.rows(beta) == 1 && self.cols(beta) == n, "layer_norm beta shape");
        let xv = &self.nodes[x.0].values;
        let gv = &self.nodes[gamma.0].values;
        let bv = &self.nodes[beta.0].values;
        let mut out = vec![0.0; m * n];
        let mut stats = Vec::with_capacity(m);
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rstd = 1.0 / libm::sqrt(var + eps);
            stats.push((mean, rstd));
            for j in 0..n {
                out[i * n + j] = gv[j] * (row[j] - mean) * rstd + bv[j];
            }
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(m, n, out, ng, Op::LayerNormRows { x, gamma, beta, stats })
    }

    /// Inverted dropout. Identity in `Eval` phase or at rate 0; otherwise
    /// keeps each element with probability `1-rate` and scales kept values
    /// by `1/(1-rate)`.
    pub fn dropout(&mut self, x: TensorId, rate: f64, rng: &mut ChaCha8Rng) -> TensorId {
        assert!((0.0..1.0).contains(&rate), "dropout rate {rate}");
        if self.phase == Phase::Eval || rate == 0.0 {
            return x;
        }
        let scale = 1.0 / (1.0 - rate);
        let keep: Vec<bool> = (0..self.nodes[x.0].values.len())
            .map(|_| !rng::bernoulli(rng, rate))
            .collect();
        let values = self.nodes[x.0]
            .values
            .iter()
            .zip(&keep)
            .map(|(&v, &k)| if k { v * scale } else { 0.0 })
            .collect();
        let (r, c) = (self.rows(x), self.cols(x));
        let ng = self.needs(x);
        self.push(r, c, values, ng, Op::Dropout { x, keep, scale })
    }

    /// Mean over rows flagged valid; rows flagged false contribute nothing,
    /// in value or gradient. Errors when no row is valid.
    pub fn mean_pool_masked(&mut self, x: TensorId, mask: &[bool]) -> Result<TensorId> {
        let (m, n) = (self.rows(x), self.cols(x));
        if mask.len() != m {
            return Err(Error::ShapeMismatch(format!(
                "pool mask has {} entries for {} rows",
                mask.len(),
                m
            )));
        }
        let n_valid = mask.iter().filter(|v| **v).count();
        if n_valid == 0 {
            return Err(Error::Empty("mean_pool_masked with zero valid frames"));
        }
        let xv = &self.nodes[x.0].values;
        let mut out = vec![0.0; n];
        for i in 0..m {
            if mask[i] {
                for j in 0..n {
                    out[j] += xv[i * n + j];
                }
            }
        }
        for o in &mut out {
            *o /= n_valid as f64;
        }
        let ng = self.needs(x);
        Ok(self.push(
            1,
            n,
            out,
            ng,
            Op::MeanPoolMasked {
                x,
                mask: mask.to_vec(),
                n_valid,
            },
        ))
    }

    /// Replace rows flagged true with the (1xN) embedding row.
    pub fn replace_masked_rows(&mut self, x: TensorId, emb: TensorId, mask: &[bool]) -> TensorId {
        let (m, n) = (self.rows(x), self.cols(x));
        assert_eq!(mask.len(), m, "row mask length");
        assert!(self.rows(emb) == 1 && self.cols(emb) == n, "embedding shape");
        let xv = &self.nodes[x.0].values;
        let ev = &self.nodes[emb.0].values;
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            if mask[i] {
                out.extend_from_slice(ev);
            } else {
                out.extend_from_slice(&xv[i * n..(i + 1) * n]);
            }
        }
        let ng = self.needs(x) || self.needs(emb);
        self.push(
            m,
            n,
            out,
            ng,
            Op::ReplaceMaskedRows {
                x,
                emb,
                mask: mask.to_vec(),
            },
        )
    }

    /// Cross-entropy of (N, C) logits against class ids, reduced to a 1x1
    /// scalar as `sum_i w_{y_i} * CE_i / sum_i w_{y_i}` over non-ignored
    /// samples. `class_weights = None` means all weights are 1 (the mean).
    /// Samples whose target equals `ignore_id` contribute exactly nothing,
    /// in value or gradient.
    pub fn cross_entropy(
        &mut self,
        logits: TensorId,
        targets: &[usize],
        class_weights: Option<&[f64]>,
        ignore_id: Option<usize>,
    ) -> Result<TensorId> {
        let (m, c) = (self.rows(logits), self.cols(logits));
        if targets.len() != m {
            return Err(Error::ShapeMismatch(format!(
                "{} targets for {} logit rows",
                targets.len(),
                m
            )));
        }
        let weights: Vec<f64> = match class_weights {
            Some(w) => {
                if w.len() != c {
                    return Err(Error::ShapeMismatch(format!(
                        "{} class weights for {} classes",
                        w.len(),
                        c
                    )));
                }
                w.to_vec()
            }
            None => vec![1.0; c],
        };
        let lv = &self.nodes[logits.0].values;
        let mut probs = vec![0.0; m * c];
        let mut loss_acc = 0.0;
        let mut weight_sum = 0.0;
        let mut any = false;
        for i in 0..m {
            let y = targets[i];
            if ignore_id == Some(y) {
                continue;
            }
            if y >= c {
                return Err(Error::InvalidValue(format!(
                    "target {y} out of range for {c} classes"
                )));
            }
            let w = weights[y];
            if w <= 0.0 {
                return Err(Error::InvalidValue(format!(
                    "nonpositive weight {w} for target class {y}"
                )));
            }
            any = true;
            let row = &lv[i * c..(i + 1) * c];
            let prow = &mut probs[i * c..(i + 1) * c];
            let lse = softmax_row(row, prow);
            loss_acc += w * (lse - row[y]);
            weight_sum += w;
        }
        if !any {
            return Err(Error::Empty("cross_entropy with every sample ignored"));
        }
        let loss = loss_acc / weight_sum;
        let ng = self.needs(logits);
        Ok(self.push(
            1,
            1,
            vec![loss],
            ng,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights,
                ignore: ignore_id,
                probs,
                weight_sum,
            },
        ))
    }

    /// `x @ w^T + b` with `w` shaped (out, in) and `b` shaped (1, out).
    pub fn linear(&mut self, x: TensorId, w: TensorId, b: TensorId) -> TensorId {
        let wt = self.transpose(w);
        let xw = self.matmul(x, wt);
        self.add_rowvec(xw, b)
    }

    /// Linear layer with an optional low-rank adapter:
    /// `x w^T + b + scale * ((x a^T) b_up^T)` where `a` is (r, in) and
    /// `b_up` is (out, r). With `b_up = 0` this equals the base layer
    /// bit-for-bit (the extra term is exactly zero).
    pub fn linear_adapted(
        &mut self,
        x: TensorId,
        w: TensorId,
        b: TensorId,
        adapter: Option<(TensorId, TensorId, f64)>,
    ) -> TensorId {
        let base = self.linear(x, w, b);
        match adapter {
            None => base,
            Some((a, b_up, scale)) => {
                let at = self.transpose(a);
                let xa = self.matmul(x, at);
                let bt = self.transpose(b_up);
                let low = self.matmul(xa, bt);
                let scaled = self.affine(low, scale, 0.0);
                self.add(base, scaled)
            }
        }
    }

    /// Run the backward pass from a scalar loss.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        let ln = &self.nodes[loss.0];
        if ln.rows != 1 || ln.cols != 1 {
            return Err(Error::ShapeMismatch(format!(
                "backward needs a scalar loss, got {}x{}",
                ln.rows, ln.cols
            )));
        }
        if !ln.needs_grad {
            // Nothing trainable upstream; gradients are all zero.
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let op = self.nodes[i].op.clone();
            self.backprop(i, &g, &op);
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    /// Gradients of all bound parameters, as (param index, grad) pairs in
    /// binding order. Parameters without a gradient path are omitted.
    pub fn param_grads(&self) -> Vec<(usize, Vec<f64>)> {
        self.bindings
            .iter()
            .filter_map(|&(t, idx)| self.nodes[t.0].grad.as_ref().map(|g| (idx, g.clone())))
            .collect()
    }

    /// Run backward and fold parameter gradients into the store, scaled.
    pub fn accumulate_grads(&mut self, loss: TensorId, ps: &mut ParamSet, scale: f64) -> Result<()> {
        self.backward(loss)?;
        ps.add_grads(&self.param_grads(), scale);
        Ok(())
    }

    fn accum(&mut self, id: TensorId, contribution: &[f64]) {
        let node = &mut self.nodes[id.0];
        if !node.needs_grad {
            return;
        }
        match &mut node.grad {
            Some(g) => {
                for (d, s) in g.iter_mut().zip(contribution) {
                    *d += s;
                }
            }
            None => node.grad = Some(contribution.to_vec()),
        }
    }

    fn backprop(&mut self, node: usize, g: &[f64], op: &Op) {
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(*a, g);
                self.accum(*b, g);
            }
            Op::Sub(a, b) => {
                self.accum(*a, g);
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                self.accum(*b, &neg);
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let da: Vec<f64> = g.iter().zip(&self.nodes[b.0].values).map(|(g, b)| g * b).collect();
                    self.accum(*a, &da);
                }
                if self.needs(*b) {
                    let db: Vec<f64> = g.iter().zip(&self.nodes[a.0].values).map(|(g, a)| g * a).collect();
                    self.accum(*b, &db);
                }
            }
            Op::Affine { x, mul } => {
                let dx: Vec<f64> = g.iter().map(|v| mul * v).collect();
                self.accum(*x, &dx);
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.rows(*a), self.cols(*a));
                let n = self.cols(*b);
                if self.needs(*a) {
                    // dA = G * B^T
                    let bv = &self.nodes[b.0].values;
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            da[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        }
                    }
                    self.accum(*a, &da);
                }
                if self.needs(*b) {
                    // dB = A^T * G
                    let av = &self.nodes[a.0].values;
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let aip = av[i * k + p];
                            if aip != 0.0 {
                                for (d, gz) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                    *d += aip * gz;
                                }
                            }
                        }
                    }
                    self.accum(*b, &db);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (self.rows(*a), self.cols(*a));
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        da[i * n + j] = g[j * m + i];
                    }
                }
                self.accum(*a, &da);
            }
            Op::AddRowVec { x, v } => {
                self.accum(*x, g);
                if self.needs(*v) {
                    let n = self.cols(*v);
                    let m = g.len() / n;
                    let mut dv = vec![0.0; n];
                    for i in 0..m {
                        for j in 0..n {
                            dv[j] += g[i * n + j];
                        }
                    }
                    self.accum(*v, &dv);
                }
            }
            Op::SliceCols { x, start } => {
                let (m, n) = (self.rows(*x), self.cols(*x));
                let len = g.len() / m;
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    dx[i * n + start..i * n + start + len].copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                self.accum(*x, &dx);
            }
            Op::ConcatCols(parts) => {
                let m = self.rows(TensorId(node));
                let total = self.cols(TensorId(node));
                let mut offset = 0;
                for &p in parts {
                    let c = self.cols(p);
                    if self.needs(p) {
                        let mut dp = vec![0.0; m * c];
                        for i in 0..m {
                            dp[i * c..(i + 1) * c]
                                .copy_from_slice(&g[i * total + offset..i * total + offset + c]);
                        }
                        self.accum(p, &dp);
                    }
                    offset += c;
                }
            }
            Op::ConcatRows(parts) => {
                let n = self.cols(TensorId(node));
                let mut offset = 0;
                for &p in parts {
                    let r = self.rows(p);
                    if self.needs(p) {
                        self.accum(p, &g[offset * n..(offset + r) * n]);
                    }
                    offset += r;
                }
            }
            Op::Conv1d { x, w, b, kernel, stride } => {
                let (_t_in, c_in) = (self.rows(*x), self.cols(*x));
                let c_out = self.rows(*w);
                let t_out = self.rows(TensorId(node));
                let win = kernel * c_in;
                if self.needs(*b) {
                    let mut db = vec![0.0; c_out];
                    for t in 0..t_out {
                        for co in 0..c_out {
                            db[co] += g[t * c_out + co];
                        }
                    }
                    self.accum(*b, &db);
                }
                if self.needs(*w) {
                    let xv = &self.nodes[x.0].values;
                    let mut dw = vec![0.0; c_out * win];
                    for t in 0..t_out {
                        let x_win = &xv[t * stride * c_in..t * stride * c_in + win];
                        for co in 0..c_out {
                            let gv = g[t * c_out + co];
                            if gv != 0.0 {
                                for (d, xj) in dw[co * win..(co + 1) * win].iter_mut().zip(x_win) {
                                    *d += gv * xj;
                                }
                            }
                        }
                    }
                    self.accum(*w, &dw);
                }
                if self.needs(*x) {
                    let wv = &self.nodes[w.0].values;
                    let mut dx = vec![0.0; self.nodes[x.0].values.len()];
                    for t in 0..t_out {
                        let base = t * stride * c_in;
                        for co in 0..c_out {
                            let gv = g[t * c_out + co];
                            if gv != 0.0 {
                                let wrow = &wv[co * win..(co + 1) * win];
                                for (d, wj) in dx[base..base + win].iter_mut().zip(wrow) {
                                    *d += gv * wj;
                                }
                            }
                        }
                    }
                    self.accum(*x, &dx);
                }
            }
            Op::Gelu(x) => {
                let dx: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[x.0].values)
                    .map(|(g, &v)| g * gelu_grad_f(v))
                    .collect();
                self.accum(*x, &dx);
            }
            Op::Tanh(x) => {
                let y = &self.nodes[node].values;
                let dx: Vec<f64> = g.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect();
                self.accum(*x, &dx);
            }
            Op::Sigmoid(x) => {
                let y = &self.nodes[node].values;
                let dx: Vec<f64> = g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect();
                self.accum(*x, &dx);
            }
            Op::SoftmaxRows(x) => {
                let (m, n) = (self.rows(TensorId(node)), self.cols(TensorId(node)));
                let y = &self.nodes[node].values;
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    let yr = &y[i * n..(i + 1) * n];
                    let gr = &g[i * n..(i + 1) * n];
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for j in 0..n {
                        dx[i * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accum(*x, &dx);
            }
            Op::LayerNormRows { x, gamma, beta, stats } => {
                let (m, n) = (self.rows(*x), self.cols(*x));
                let xv = &self.nodes[x.0].values;
                let gv = &self.nodes[gamma.0].values;
                let mut dgamma = vec![0.0; n];
                let mut dbeta = vec![0.0; n];
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    let (mean, rstd) = stats[i];
                    let xr = &xv[i * n..(i + 1) * n];
                    let gr = &g[i * n..(i + 1) * n];
                    // dxhat = g * gamma; dx via the standard two-mean form.
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    for j in 0..n {
                        let xhat = (xr[j] - mean) * rstd;
                        let dxhat = gr[j] * gv[j];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                        dgamma[j] += gr[j] * xhat;
                        dbeta[j] += gr[j];
                    }
                    let inv_n = 1.0 / n as f64;
                    for j in 0..n {
                        let xhat = (xr[j] - mean) * rstd;
                        let dxhat = gr[j] * gv[j];
                        dx[i * n + j] =
                            rstd * (dxhat - inv_n * sum_dxhat - xhat * inv_n * sum_dxhat_xhat);
                    }
                }
                if self.needs(*x) {
                    self.accum(*x, &dx);
                }
                if self.needs(*gamma) {
                    self.accum(*gamma, &dgamma);
                }
                if self.needs(*beta) {
                    self.accum(*beta, &dbeta);
                }
            }
            Op::Dropout { x, keep, scale } => {
                let dx: Vec<f64> = g
                    .iter()
                    .zip(keep)
                    .map(|(g, &k)| if k { g * scale } else { 0.0 })
                    .collect();
                self.accum(*x, &dx);
            }
            Op::MeanPoolMasked { x, mask, n_valid } => {
                let n = self.cols(*x);
                let share = 1.0 / *n_valid as f64;
                let mut dx = vec![0.0; self.nodes[x.0].values.len()];
                for (i, &valid) in mask.iter().enumerate() {
                    if valid {
                        for j in 0..n {
                            dx[i * n + j] = g[j] * share;
                        }
                    }
                }
                self.accum(*x, &dx);
            }
            Op::ReplaceMaskedRows { x, emb, mask } => {
                let n = self.cols(*x);
                if self.needs(*x) {
                    let mut dx = vec![0.0; self.nodes[x.0].values.len()];
                    for (i, &masked) in mask.iter().enumerate() {
                        if !masked {
                            dx[i * n..(i + 1) * n].copy_from_slice(&g[i * n..(i + 1) * n]);
                        }
                    }
                    self.accum(*x, &dx);
                }
                if self.needs(*emb) {
                    let mut de = vec![0.0; n];
                    for (i, &masked) in mask.iter().enumerate() {
                        if masked {
                            for j in 0..n {
                                de[j] += g[i * n + j];
                            }
                        }
                    }
                    self.accum(*emb, &de);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                ignore,
                probs,
                weight_sum,
            } => {
                let c = self.cols(*logits);
                let m = targets.len();
                let gs = g[0] / weight_sum;
                let mut dz = vec![0.0; m * c];
                for i in 0..m {
                    let y = targets[i];
                    if *ignore == Some(y) {
                        continue; // exactly zero gradient at ignored rows
                    }
                    let w = weights[y];
                    for j in 0..c {
                        let indicator = if j == y { 1.0 } else { 0.0 };
                        dz[i * c + j] = gs * w * (probs[i * c + j] - indicator);
                    }
                }
                self.accum(*logits, &dz);
            }
        }
    }

    fn assert_same_shape(&self, a: TensorId, b: TensorId, what: &str) {
        assert!(
            self.rows(a) == self.rows(b) && self.cols(a) == self.cols(b),
            "{what}: {}x{} vs {}x{}",
            self.rows(a),
            self.cols(a),
            self.rows(b),
            self.cols(b)
        );
    }

    fn zip_values(&self, a: TensorId, b: TensorId, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(&x, &y)| f(x, y))
            .collect()
    }
}

/// Multi-head attention output; `probs` exposes the per-head attention
/// matrices for inspection.
pub struct MhaOutput {
    pub out: TensorId,
    pub probs: Vec<TensorId>,
}

/// Weight handles for one attention layer, all already on the tape.
/// Weights are (d, d) in (out, in) orientation, biases (1, d).
#[derive(Clone, Copy)]
pub struct MhaWeights {
    pub wq: TensorId,
    pub bq: TensorId,
    pub wk: TensorId,
    pub bk: TensorId,
    pub wv: TensorId,
    pub bv: TensorId,
    pub wo: TensorId,
    pub bo: TensorId,
}

/// Additive attention-mask value for padded key positions. Finite so that a
/// fully masked row still softmaxes to numbers instead of NaN.
pub const ATTN_MASK_NEG: f64 = -1e30;

/// Standard scaled dot-product multi-head attention over an (L, d) sequence
/// with learned Q/K/V/output projections. `key_mask`, when given, is added
/// to every score row (0 for visible keys, [`ATTN_MASK_NEG`] for padding).
/// Optional low-rank adapters apply to the Q and V projections.
pub fn multi_head_attention(
    tape: &mut Tape,
    x: TensorId,
    w: &MhaWeights,
    n_heads: usize,
    key_mask: Option<&[f64]>,
    q_adapter: Option<(TensorId, TensorId, f64)>,
    v_adapter: Option<(TensorId, TensorId, f64)>,
) -> Result<MhaOutput> {
    let d = tape.cols(x);
    if n_heads == 0 || d % n_heads != 0 {
        return Err(Error::InvalidConfig(format!(
            "model width {d} not divisible by {n_heads} heads"
        )));
    }
    let dh = d / n_heads;
    let q = tape.linear_adapted(x, w.wq, w.bq, q_adapter);
    let k = tape.linear_adapted(x, w.wk, w.bk, None);
    let v = tape.linear_adapted(x, w.wv, w.bv, v_adapter);
    let mask_row = key_mask.map(|mv| {
        debug_assert_eq!(mv.len(), tape.rows(x));
        tape.leaf(1, mv.len(), mv.to_vec())
    });
    let mut heads = Vec::with_capacity(n_heads);
    let mut probs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = tape.slice_cols(q, h * dh, dh);
        let kh = tape.slice_cols(k, h * dh, dh);
        let vh = tape.slice_cols(v, h * dh, dh);
        let kt = tape.transpose(kh);
        let scores = tape.matmul(qh, kt);
        let scaled = tape.affine(scores, 1.0 / libm::sqrt(dh as f64), 0.0);
        let masked = match mask_row {
            Some(mr) => tape.add_rowvec(scaled, mr),
            None => scaled,
        };
        let p = tape.softmax_rows(masked);
        probs.push(p);
        heads.push(tape.matmul(p, vh));
    }
    let ctx = tape.concat_cols(&heads);
    let out = tape.linear(ctx, w.wo, w.bo);
    Ok(MhaOutput { out, probs })
}

fn softmax_row(row: &[f64], out: &mut [f64]) -> f64 {
    let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = libm::exp(v - max);
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
    // Return the log-sum-exp as a byproduct for cross-entropy.
    max + libm::log(sum)
}

fn gelu_f(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / core::f64::consts::SQRT_2))
}

fn gelu_grad_f(x: f64) -> f64 {
    let phi = libm::exp(-0.5 * x * x) / libm::sqrt(2.0 * core::f64::consts::PI);
    0.5 * (1.0 + libm::erf(x / core::f64::consts::SQRT_2)) + x * phi
}

fn sigmoid_f(x: f64) -> f64 {
    1.0 / (1.0 + libm::exp(-x))
}

/// Raw `C += A*B` with A (m,k) and B (k,n), row-major.
fn matmul_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut out[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            if aip != 0.0 {
                let brow = &b[p * n..(p + 1) * n];
                for (c, &bv) in crow.iter_mut().zip(brow) {
                    *c += aip * bv;
                }
            }
        }
    }
}
