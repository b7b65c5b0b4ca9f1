//! Reverse-mode autodiff over a recorded operation graph.
//!
//! A [`Graph`] owns every tensor produced during a forward pass, in execution
//! order. Each non-leaf node remembers its operation and input ids, so a
//! single reverse sweep visits every node exactly once and accumulates
//! gradients additively across fan-out. Gradients are only propagated into
//! subgraphs that can reach a `requires_grad` leaf; frozen parameters receive
//! no gradient buffer at all.

use super::{Scalar, Tensor};
use crate::error::TensorError;

/// Handle to a tensor stored in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

/// Recorded operation with the input ids and any data backward needs.
#[derive(Debug, Clone)]
pub enum Op {
    Leaf,
    /// C[m,n] = A[m,k] · B[k,n]
    MatMul { a: TensorId, b: TensorId },
    /// Batched product over the leading axis; `trans_b` multiplies by Bᵀ.
    BatchMatMul {
        a: TensorId,
        b: TensorId,
        trans_b: bool,
    },
    Add { a: TensorId, b: TensorId },
    /// Matrix plus a broadcast row vector.
    AddBias { a: TensorId, bias: TensorId },
    Mul { a: TensorId, b: TensorId },
    /// Multiply by a compile-time constant.
    Scale { a: TensorId, c: f64 },
    /// Multiply by a trainable 1-element tensor.
    ScaleByParam { a: TensorId, lambda: TensorId },
    Relu { a: TensorId },
    Gelu { a: TensorId },
    /// Softmax along the last axis, shift-stable.
    Softmax { a: TensorId },
    /// Additive causal mask over `[heads, m, m]` score tensors.
    CausalMask { a: TensorId },
    LayerNorm {
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        eps: f64,
    },
    /// Mean negative log-likelihood over positions with target >= 0.
    CrossEntropy {
        logits: TensorId,
        targets: Vec<i64>,
    },
    /// Row gather: out[i] = table[ids[i]].
    Embedding { table: TensorId, ids: Vec<usize> },
    ConcatRows { parts: Vec<TensorId> },
    SliceRows {
        a: TensorId,
        start: usize,
        len: usize,
    },
    Reshape { a: TensorId },
    Transpose { a: TensorId },
    /// `[m, heads*d]` -> `[heads, m, d]`
    SplitHeads { a: TensorId, heads: usize },
    /// `[heads, m, d]` -> `[m, heads*d]`
    MergeHeads { a: TensorId },
    /// Pairwise rotation of `[heads, m, d]` coordinates by position-dependent angles.
    Rotary {
        a: TensorId,
        positions: Vec<usize>,
        base: f64,
    },
    /// Inverted dropout with a pre-drawn keep mask.
    Dropout {
        a: TensorId,
        mask: Vec<bool>,
        keep_scale: f64,
    },
    /// Patch extraction for convolution: `[c, h, w]` -> `[out_h*out_w, c*k*k]`.
    Im2Col {
        a: TensorId,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    /// `[m, c]` -> `[1, c]` column means (global average pool).
    MeanRows { a: TensorId },
    SumAll { a: TensorId },
}

struct Node<T: Scalar> {
    tensor: Tensor<T>,
    op: Op,
    needs_grad: bool,
}

/// Additive mask value for disallowed attention positions. Finite, but far
/// enough below any real score that `exp` underflows to exactly zero after
/// the shift, which keeps causality bit-exact.
const MASKED_SCORE: f64 = -1.0e9;

/// Topologically ordered record of executed operations.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    backward_run: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_run: false,
        }
    }

    /// Register an input tensor. Gradients flow into it only if
    /// `tensor.requires_grad` is set.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> TensorId {
        let needs = tensor.requires_grad;
        self.push(tensor, Op::Leaf, needs)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn tensor(&self, id: TensorId) -> &Tensor<T> {
        &self.nodes[id.0].tensor
    }

    pub fn value(&self, id: TensorId) -> &[T] {
        self.nodes[id.0].tensor.data()
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        self.nodes[id.0].tensor.shape()
    }

    pub fn grad(&self, id: TensorId) -> Option<&[T]> {
        self.grads[id.0].as_deref()
    }

    /// Drop all gradients so another backward pass may run.
    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
        for n in &mut self.nodes {
            n.tensor.grad = None;
        }
        self.backward_run = false;
    }

    fn push(&mut self, tensor: Tensor<T>, op: Op, needs_grad: bool) -> TensorId {
        self.nodes.push(Node {
            tensor,
            op,
            needs_grad,
        });
        self.grads.push(None);
        TensorId(self.nodes.len() - 1)
    }

    fn needs(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn record(
        &mut self,
        shape: Vec<usize>,
        data: Vec<T>,
        op: Op,
        inputs: &[TensorId],
    ) -> TensorId {
        let needs = inputs.iter().any(|&i| self.needs(i));
        let tensor = Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        };
        self.push(tensor, op, needs)
    }

    // ── forward ops ─────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        acc_ab(self.value(a), self.value(b), m, k, n, &mut out);
        Ok(self.record(vec![m, n], out, Op::MatMul { a, b }, &[a, b]))
    }

    /// Batched matmul over the leading axis. With `trans_b`, computes
    /// `A[B,m,k] · Bt[B,n,k]ᵀ -> [B,m,n]`; otherwise `A[B,m,k] · B[B,k,n]`.
    pub fn bmm(
        &mut self,
        a: TensorId,
        b: TensorId,
        trans_b: bool,
    ) -> Result<TensorId, TensorError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ok = sa.len() == 3
            && sb.len() == 3
            && sa[0] == sb[0]
            && if trans_b { sa[2] == sb[2] } else { sa[2] == sb[1] };
        if !ok {
            return Err(TensorError::ShapeMismatch {
                op: "bmm",
                lhs: sa,
                rhs: sb,
            });
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let mut out = vec![T::zero(); batch * m * n];
        for i in 0..batch {
            let av = &self.value(a)[i * m * k..(i + 1) * m * k];
            let bv = &self.value(b)[i * k * n..(i + 1) * k * n];
            let ov = &mut out[i * m * n..(i + 1) * m * n];
            if trans_b {
                acc_abt(av, bv, m, k, n, ov);
            } else {
                acc_ab(av, bv, m, k, n, ov);
            }
        }
        Ok(self.record(
            vec![batch, m, n],
            out,
            Op::BatchMatMul { a, b, trans_b },
            &[a, b],
        ))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let shape = self.shape(a).to_vec();
        Ok(self.record(shape, data, Op::Add { a, b }, &[a, b]))
    }

    pub fn add_bias(&mut self, a: TensorId, bias: TensorId) -> Result<TensorId, TensorError> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(bias).to_vec();
        if sa.len() != 2 || sb.len() != 1 || sb[0] != sa[1] {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                lhs: sa,
                rhs: sb,
            });
        }
        let n = sa[1];
        let bv = self.value(bias).to_vec();
        let data: Vec<T> = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bv[i % n])
            .collect();
        Ok(self.record(sa, data, Op::AddBias { a, bias }, &[a, bias]))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op: "mul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let shape = self.shape(a).to_vec();
        Ok(self.record(shape, data, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        let cv = T::from_f64(c);
        let data: Vec<T> = self.value(a).iter().map(|&x| x * cv).collect();
        let shape = self.shape(a).to_vec();
        self.record(shape, data, Op::Scale { a, c }, &[a])
    }

    /// Multiply every element by a trainable scalar parameter.
    pub fn scale_by_param(
        &mut self,
        a: TensorId,
        lambda: TensorId,
    ) -> Result<TensorId, TensorError> {
        if self.tensor(lambda).numel() != 1 {
            return Err(TensorError::BadShape {
                op: "scale_by_param",
                expected: "1-element scalar".into(),
                shape: self.shape(lambda).to_vec(),
            });
        }
        let lv = self.value(lambda)[0];
        let data: Vec<T> = self.value(a).iter().map(|&x| x * lv).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.record(shape, data, Op::ScaleByParam { a, lambda }, &[a, lambda]))
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        let data: Vec<T> = self
            .value(a)
            .iter()
            .map(|&x| if x > T::zero() { x } else { T::zero() })
            .collect();
        let shape = self.shape(a).to_vec();
        self.record(shape, data, Op::Relu { a }, &[a])
    }

    pub fn gelu(&mut self, a: TensorId) -> TensorId {
        let data: Vec<T> = self.value(a).iter().map(|&x| gelu_val(x)).collect();
        let shape = self.shape(a).to_vec();
        self.record(shape, data, Op::Gelu { a }, &[a])
    }

    /// Softmax along the last axis. The maximum is subtracted before
    /// exponentiation, so constant shifts leave the output unchanged.
    pub fn softmax(&mut self, a: TensorId) -> TensorId {
        let shape = self.shape(a).to_vec();
        let n = *shape.last().expect("softmax needs rank >= 1");
        let mut data = self.value(a).to_vec();
        for row in data.chunks_mut(n) {
            softmax_row(row);
        }
        self.record(shape, data, Op::Softmax { a }, &[a])
    }

    /// Additive causal mask on `[heads, m, m]` attention scores: entries with
    /// column > row are replaced by a large negative constant.
    pub fn causal_mask(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 3 || shape[1] != shape[2] {
            return Err(TensorError::BadShape {
                op: "causal_mask",
                expected: "[heads, m, m] scores".into(),
                shape,
            });
        }
        let (heads, m) = (shape[0], shape[1]);
        let neg = T::from_f64(MASKED_SCORE);
        let mut data = self.value(a).to_vec();
        for h in 0..heads {
            for i in 0..m {
                for j in (i + 1)..m {
                    data[h * m * m + i * m + j] = neg;
                }
            }
        }
        Ok(self.record(shape, data, Op::CausalMask { a }, &[a]))
    }

    /// Per-row standardization over the last axis followed by an affine map.
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        eps: f64,
    ) -> Result<TensorId, TensorError> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().expect("layer_norm needs rank >= 1");
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: shape,
                rhs: self.shape(gain).to_vec(),
            });
        }
        let gv = self.value(gain).to_vec();
        let bv = self.value(bias).to_vec();
        let mut data = self.value(x).to_vec();
        for row in data.chunks_mut(d) {
            let (mean, rstd) = row_moments(row, eps);
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * rstd * gv[j] + bv[j];
            }
        }
        Ok(self.record(
            shape,
            data,
            Op::LayerNorm { x, gain, bias, eps },
            &[x, gain, bias],
        ))
    }

    /// Mean over positions with `target >= 0` of the negative log-probability
    /// of the target under a softmax of the logits row. Positions with a
    /// negative target contribute nothing (loss masking).
    pub fn cross_entropy(
        &mut self,
        logits: TensorId,
        targets: &[i64],
    ) -> Result<TensorId, TensorError> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(TensorError::BadShape {
                op: "cross_entropy",
                expected: format!("[{} x V] logits", targets.len()),
                shape,
            });
        }
        let vocab = shape[1];
        let mut total = 0.0_f64;
        let mut counted = 0usize;
        for (row, &t) in self.value(logits).chunks(vocab).zip(targets) {
            if t < 0 {
                continue;
            }
            if t as usize >= vocab {
                return Err(TensorError::TargetOutOfRange { target: t, vocab });
            }
            total += row_lse(row) - row[t as usize].as_f64();
            counted += 1;
        }
        if counted == 0 {
            return Err(TensorError::BadShape {
                op: "cross_entropy",
                expected: "at least one unmasked target".into(),
                shape,
            });
        }
        let loss = T::from_f64(total / counted as f64);
        Ok(self.record(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
            &[logits],
        ))
    }

    /// Gather embedding rows for a token id sequence.
    pub fn embedding(&mut self, table: TensorId, ids: &[usize]) -> Result<TensorId, TensorError> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return Err(TensorError::BadShape {
                op: "embedding",
                expected: "[V x d] table".into(),
                shape,
            });
        }
        let (vocab, d) = (shape[0], shape[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(TensorError::TargetOutOfRange {
                target: bad as i64,
                vocab,
            });
        }
        let tv = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        Ok(self.record(
            vec![ids.len(), d],
            data,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Stack 2-D tensors with a common column count along axis 0.
    pub fn concat_rows(&mut self, parts: &[TensorId]) -> Result<TensorId, TensorError> {
        assert!(!parts.is_empty(), "concat_rows needs at least one part");
        let cols = self.shape(parts[0])[1];
        let mut rows = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[1] != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: s.to_vec(),
                });
            }
            rows += s[0];
        }
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            data.extend_from_slice(self.value(p));
        }
        Ok(self.record(
            vec![rows, cols],
            data,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            parts,
        ))
    }

    pub fn slice_rows(
        &mut self,
        a: TensorId,
        start: usize,
        len: usize,
    ) -> Result<TensorId, TensorError> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || start + len > s[0] {
            return Err(TensorError::BadShape {
                op: "slice_rows",
                expected: format!("2-D tensor with at least {} rows", start + len),
                shape: s,
            });
        }
        let cols = s[1];
        let data = self.value(a)[start * cols..(start + len) * cols].to_vec();
        Ok(self.record(
            vec![len, cols],
            data,
            Op::SliceRows { a, start, len },
            &[a],
        ))
    }

    pub fn reshape(&mut self, a: TensorId, shape: &[usize]) -> Result<TensorId, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != self.tensor(a).numel() {
            return Err(TensorError::BadShape {
                op: "reshape",
                expected: format!("numel {}", self.tensor(a).numel()),
                shape: shape.to_vec(),
            });
        }
        let data = self.value(a).to_vec();
        Ok(self.record(shape.to_vec(), data, Op::Reshape { a }, &[a]))
    }

    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(TensorError::BadShape {
                op: "transpose",
                expected: "2-D tensor".into(),
                shape: s,
            });
        }
        let (m, n) = (s[0], s[1]);
        let av = self.value(a);
        let mut data = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = av[i * n + j];
            }
        }
        Ok(self.record(vec![n, m], data, Op::Transpose { a }, &[a]))
    }

    /// `[m, heads*d]` -> `[heads, m, d]`.
    pub fn split_heads(&mut self, a: TensorId, heads: usize) -> Result<TensorId, TensorError> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || s[1] % heads != 0 {
            return Err(TensorError::BadShape {
                op: "split_heads",
                expected: format!("[m, k] with k divisible by {heads}"),
                shape: s,
            });
        }
        let (m, d) = (s[0], s[1] / heads);
        let av = self.value(a);
        let mut data = vec![T::zero(); m * heads * d];
        for i in 0..m {
            for h in 0..heads {
                let src = i * heads * d + h * d;
                let dst = h * m * d + i * d;
                data[dst..dst + d].copy_from_slice(&av[src..src + d]);
            }
        }
        Ok(self.record(
            vec![heads, m, d],
            data,
            Op::SplitHeads { a, heads },
            &[a],
        ))
    }

    /// `[heads, m, d]` -> `[m, heads*d]`.
    pub fn merge_heads(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 {
            return Err(TensorError::BadShape {
                op: "merge_heads",
                expected: "[heads, m, d] tensor".into(),
                shape: s,
            });
        }
        let (heads, m, d) = (s[0], s[1], s[2]);
        let av = self.value(a);
        let mut data = vec![T::zero(); m * heads * d];
        for h in 0..heads {
            for i in 0..m {
                let src = h * m * d + i * d;
                let dst = i * heads * d + h * d;
                data[dst..dst + d].copy_from_slice(&av[src..src + d]);
            }
        }
        Ok(self.record(vec![m, heads * d], data, Op::MergeHeads { a }, &[a]))
    }

    /// Rotate consecutive coordinate pairs of `[heads, m, d]` query/key
    /// vectors by `positions[i] * base^(-2j/d)`. Norm-preserving, and dot
    /// products between rotated vectors depend only on position differences.
    pub fn rotary(
        &mut self,
        a: TensorId,
        positions: &[usize],
        base: f64,
    ) -> Result<TensorId, TensorError> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 || s[1] != positions.len() {
            return Err(TensorError::BadShape {
                op: "rotary",
                expected: format!("[heads, {}, d] tensor", positions.len()),
                shape: s,
            });
        }
        let (heads, m, d) = (s[0], s[1], s[2]);
        if d % 2 != 0 {
            return Err(TensorError::OddHeadDim { dim: d });
        }
        let mut data = self.value(a).to_vec();
        rotate_pairs(&mut data, heads, m, d, positions, base, false);
        Ok(self.record(
            s,
            data,
            Op::Rotary {
                a,
                positions: positions.to_vec(),
                base,
            },
            &[a],
        ))
    }

    /// Inverted dropout. In train mode each element is kept with probability
    /// `1 - p` and scaled by `1/(1-p)`; in eval mode this is the identity and
    /// records nothing.
    pub fn dropout<R: rand::Rng>(
        &mut self,
        a: TensorId,
        p: f64,
        train: bool,
        rng: &mut R,
    ) -> TensorId {
        if !train || p == 0.0 {
            return a;
        }
        assert!((0.0..1.0).contains(&p), "dropout probability must be in [0,1)");
        let keep = 1.0 - p;
        let keep_scale = 1.0 / keep;
        let scale = T::from_f64(keep_scale);
        let mask: Vec<bool> = (0..self.tensor(a).numel())
            .map(|_| rng.gen_range(0.0..1.0) < keep)
            .collect();
        let data: Vec<T> = self
            .value(a)
            .iter()
            .zip(&mask)
            .map(|(&x, &keep)| if keep { x * scale } else { T::zero() })
            .collect();
        let shape = self.shape(a).to_vec();
        self.record(shape, data, Op::Dropout { a, mask, keep_scale }, &[a])
    }

    /// Unfold `[c, h, w]` into convolution patches `[out_h*out_w, c*k*k]`,
    /// zero-padded at the borders. A matmul against a `[c*k*k, c_out]` weight
    /// completes the convolution.
    pub fn im2col(
        &mut self,
        a: TensorId,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<TensorId, TensorError> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 {
            return Err(TensorError::BadShape {
                op: "im2col",
                expected: "[c, h, w] tensor".into(),
                shape: s,
            });
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let out_h = (h + 2 * pad - kernel) / stride + 1;
        let out_w = (w + 2 * pad - kernel) / stride + 1;
        let av = self.value(a);
        let mut data = vec![T::zero(); out_h * out_w * c * kernel * kernel];
        let row_len = c * kernel * kernel;
        for oy in 0..out_h {
            for ox in 0..out_w {
                let r = oy * out_w + ox;
                for ch in 0..c {
                    for ky in 0..kernel {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kernel {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            data[r * row_len + ch * kernel * kernel + ky * kernel + kx] =
                                av[ch * h * w + iy as usize * w + ix as usize];
                        }
                    }
                }
            }
        }
        Ok(self.record(
            vec![out_h * out_w, row_len],
            data,
            Op::Im2Col {
                a,
                kernel,
                stride,
                pad,
            },
            &[a],
        ))
    }

    /// Column means of a 2-D tensor.
    pub fn mean_rows(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || s[0] == 0 {
            return Err(TensorError::BadShape {
                op: "mean_rows",
                expected: "non-empty 2-D tensor".into(),
                shape: s,
            });
        }
        let (m, c) = (s[0], s[1]);
        let inv = T::from_f64(1.0 / m as f64);
        let av = self.value(a);
        let mut data = vec![T::zero(); c];
        for row in av.chunks(c) {
            for (o, &x) in data.iter_mut().zip(row) {
                *o = *o + x;
            }
        }
        for o in &mut data {
            *o = *o * inv;
        }
        Ok(self.record(vec![1, c], data, Op::MeanRows { a }, &[a]))
    }

    pub fn sum_all(&mut self, a: TensorId) -> TensorId {
        let total = self
            .value(a)
            .iter()
            .fold(T::zero(), |acc, &x| acc + x);
        self.record(vec![1], vec![total], Op::SumAll { a }, &[a])
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Populates gradients on every
    /// reachable `requires_grad` leaf; frozen leaves stay gradient-free.
    pub fn backward(&mut self, loss: TensorId) -> Result<(), TensorError> {
        if self.backward_run {
            return Err(TensorError::BackwardTwice);
        }
        if self.tensor(loss).numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: self.shape(loss).to_vec(),
            });
        }
        self.backward_run = true;
        self.grads[loss.0] = Some(vec![T::one()]);

        for i in (0..self.nodes.len()).rev() {
            if self.grads[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let grad = self.grads[i].take().unwrap();
            self.propagate(TensorId(i), &grad);
            self.grads[i] = Some(grad);
        }

        // Mirror gradients onto the leaf tensors themselves.
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Leaf) && self.nodes[i].tensor.requires_grad {
                self.nodes[i].tensor.grad = self.grads[i].clone();
            }
        }
        Ok(())
    }

    fn acc(&mut self, id: TensorId, delta: &[T]) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        let slot = &mut self.grads[id.0];
        match slot {
            Some(g) => {
                for (a, &b) in g.iter_mut().zip(delta) {
                    *a = *a + b;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    fn acc_owned(&mut self, id: TensorId, delta: Vec<T>) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        let slot = &mut self.grads[id.0];
        match slot {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(delta) {
                    *a = *a + b;
                }
            }
            None => *slot = Some(delta),
        }
    }

    fn propagate(&mut self, id: TensorId, grad: &[T]) {
        let op = self.nodes[id.0].op.clone();
        match op {
            Op::Leaf => {}

            Op::MatMul { a, b } => {
                let [m, _n] = [self.shape(id)[0], self.shape(id)[1]];
                let k = self.shape(a)[1];
                let n = self.shape(b)[1];
                if self.needs(a) {
                    // dA = G · Bᵀ
                    let mut da = vec![T::zero(); m * k];
                    acc_abt(grad, self.value(b), m, n, k, &mut da);
                    self.acc_owned(a, da);
                }
                if self.needs(b) {
                    // dB = Aᵀ · G
                    let mut db = vec![T::zero(); k * n];
                    acc_atb(self.value(a), grad, k, m, n, &mut db);
                    self.acc_owned(b, db);
                }
            }

            Op::BatchMatMul { a, b, trans_b } => {
                let sa = self.shape(a).to_vec();
                let (batch, m, k) = (sa[0], sa[1], sa[2]);
                let n = self.shape(id)[2];
                if self.needs(a) {
                    let mut da = vec![T::zero(); batch * m * k];
                    for i in 0..batch {
                        let g = &grad[i * m * n..(i + 1) * m * n];
                        let bv = &self.value(b)[i * k * n..(i + 1) * k * n];
                        let dv = &mut da[i * m * k..(i + 1) * m * k];
                        if trans_b {
                            // C = A·Bᵀ with B stored [n,k]: dA = G·B
                            acc_ab(g, bv, m, n, k, dv);
                        } else {
                            acc_abt(g, bv, m, n, k, dv);
                        }
                    }
                    self.acc_owned(a, da);
                }
                if self.needs(b) {
                    let numel_b = self.tensor(b).numel();
                    let mut db = vec![T::zero(); numel_b];
                    for i in 0..batch {
                        let g = &grad[i * m * n..(i + 1) * m * n];
                        let av = &self.value(a)[i * m * k..(i + 1) * m * k];
                        let dv = &mut db[i * k * n..(i + 1) * k * n];
                        if trans_b {
                            // dBt = Gᵀ·A, stored [n,k]
                            acc_atb(g, av, n, m, k, dv);
                        } else {
                            acc_atb(av, g, k, m, n, dv);
                        }
                    }
                    self.acc_owned(b, db);
                }
            }

            Op::Add { a, b } => {
                self.acc(a, grad);
                self.acc(b, grad);
            }

            Op::AddBias { a, bias } => {
                self.acc(a, grad);
                if self.needs(bias) {
                    let n = self.shape(bias)[0];
                    let mut db = vec![T::zero(); n];
                    for row in grad.chunks(n) {
                        for (o, &g) in db.iter_mut().zip(row) {
                            *o = *o + g;
                        }
                    }
                    self.acc_owned(bias, db);
                }
            }

            Op::Mul { a, b } => {
                if self.needs(a) {
                    let da = zip_map(grad, self.value(b), |g, y| g * y);
                    self.acc_owned(a, da);
                }
                if self.needs(b) {
                    let db = zip_map(grad, self.value(a), |g, x| g * x);
                    self.acc_owned(b, db);
                }
            }

            Op::Scale { a, c } => {
                let cv = T::from_f64(c);
                let da: Vec<T> = grad.iter().map(|&g| g * cv).collect();
                self.acc_owned(a, da);
            }

            Op::ScaleByParam { a, lambda } => {
                let lv = self.value(lambda)[0];
                if self.needs(a) {
                    let da: Vec<T> = grad.iter().map(|&g| g * lv).collect();
                    self.acc_owned(a, da);
                }
                if self.needs(lambda) {
                    let dl = grad
                        .iter()
                        .zip(self.value(a))
                        .fold(T::zero(), |acc, (&g, &x)| acc + g * x);
                    self.acc_owned(lambda, vec![dl]);
                }
            }

            Op::Relu { a } => {
                let da = zip_map(grad, self.value(a), |g, x| {
                    if x > T::zero() {
                        g
                    } else {
                        T::zero()
                    }
                });
                self.acc_owned(a, da);
            }

            Op::Gelu { a } => {
                let da = zip_map(grad, self.value(a), |g, x| g * gelu_grad(x));
                self.acc_owned(a, da);
            }

            Op::Softmax { a } => {
                let n = *self.shape(id).last().unwrap();
                let out = self.value(id);
                let mut da = vec![T::zero(); out.len()];
                for ((orow, grow), drow) in out
                    .chunks(n)
                    .zip(grad.chunks(n))
                    .zip(da.chunks_mut(n))
                {
                    let dot = orow
                        .iter()
                        .zip(grow)
                        .fold(T::zero(), |acc, (&y, &g)| acc + y * g);
                    for ((d, &y), &g) in drow.iter_mut().zip(orow).zip(grow) {
                        *d = y * (g - dot);
                    }
                }
                self.acc_owned(a, da);
            }

            Op::CausalMask { a } => {
                let s = self.shape(id).to_vec();
                let (heads, m) = (s[0], s[1]);
                let mut da = vec![T::zero(); grad.len()];
                for h in 0..heads {
                    for i in 0..m {
                        for j in 0..=i {
                            let idx = h * m * m + i * m + j;
                            da[idx] = grad[idx];
                        }
                    }
                }
                self.acc_owned(a, da);
            }

            Op::LayerNorm { x, gain, bias, eps } => {
                let d = *self.shape(id).last().unwrap();
                let xv = self.value(x);
                let gv = self.value(gain).to_vec();
                let needs_x = self.needs(x);
                let needs_g = self.needs(gain);
                let needs_b = self.needs(bias);
                let mut dx = vec![T::zero(); xv.len()];
                let mut dg = vec![T::zero(); d];
                let mut db = vec![T::zero(); d];
                let inv_d = T::from_f64(1.0 / d as f64);
                for ((xrow, grow), dxrow) in
                    xv.chunks(d).zip(grad.chunks(d)).zip(dx.chunks_mut(d))
                {
                    let (mean, rstd) = row_moments(xrow, eps);
                    // xhat = (x - mean) * rstd
                    if needs_g || needs_b {
                        for j in 0..d {
                            let xhat = (xrow[j] - mean) * rstd;
                            dg[j] = dg[j] + grow[j] * xhat;
                            db[j] = db[j] + grow[j];
                        }
                    }
                    if needs_x {
                        // dl/dxhat = g * gain; dx = rstd*(dxhat - mean(dxhat) - xhat*mean(dxhat*xhat))
                        let mut sum_dxh = T::zero();
                        let mut sum_dxh_xh = T::zero();
                        for j in 0..d {
                            let xhat = (xrow[j] - mean) * rstd;
                            let dxh = grow[j] * gv[j];
                            sum_dxh = sum_dxh + dxh;
                            sum_dxh_xh = sum_dxh_xh + dxh * xhat;
                        }
                        let mean_dxh = sum_dxh * inv_d;
                        let mean_dxh_xh = sum_dxh_xh * inv_d;
                        for j in 0..d {
                            let xhat = (xrow[j] - mean) * rstd;
                            let dxh = grow[j] * gv[j];
                            dxrow[j] = rstd * (dxh - mean_dxh - xhat * mean_dxh_xh);
                        }
                    }
                }
                if needs_x {
                    self.acc_owned(x, dx);
                }
                if needs_g {
                    self.acc_owned(gain, dg);
                }
                if needs_b {
                    self.acc_owned(bias, db);
                }
            }

            Op::CrossEntropy { logits, targets } => {
                let vocab = self.shape(logits)[1];
                let counted = targets.iter().filter(|&&t| t >= 0).count();
                let g = grad[0].as_f64() / counted as f64;
                let lv = self.value(logits);
                let mut dl = vec![T::zero(); lv.len()];
                for (r, &t) in targets.iter().enumerate() {
                    if t < 0 {
                        continue;
                    }
                    let row = &lv[r * vocab..(r + 1) * vocab];
                    let lse = row_lse(row);
                    let drow = &mut dl[r * vocab..(r + 1) * vocab];
                    for (j, &x) in row.iter().enumerate() {
                        let p = (x.as_f64() - lse).exp();
                        drow[j] = T::from_f64(p * g);
                    }
                    drow[t as usize] = drow[t as usize] - T::from_f64(g);
                }
                self.acc_owned(logits, dl);
            }

            Op::Embedding { table, ids } => {
                if self.needs(table) {
                    let d = self.shape(table)[1];
                    let mut dt = vec![T::zero(); self.tensor(table).numel()];
                    for (r, &i) in ids.iter().enumerate() {
                        let src = &grad[r * d..(r + 1) * d];
                        let dst = &mut dt[i * d..(i + 1) * d];
                        for (o, &g) in dst.iter_mut().zip(src) {
                            *o = *o + g;
                        }
                    }
                    self.acc_owned(table, dt);
                }
            }

            Op::ConcatRows { parts } => {
                let cols = self.shape(id)[1];
                let mut offset = 0;
                for &p in &parts {
                    let rows = self.shape(p)[0];
                    let slice = &grad[offset * cols..(offset + rows) * cols];
                    self.acc(p, slice);
                    offset += rows;
                }
            }

            Op::SliceRows { a, start, len } => {
                if self.needs(a) {
                    let cols = self.shape(a)[1];
                    let mut da = vec![T::zero(); self.tensor(a).numel()];
                    da[start * cols..(start + len) * cols].copy_from_slice(grad);
                    self.acc_owned(a, da);
                }
            }

            Op::Reshape { a } => {
                self.acc(a, grad);
            }

            Op::Transpose { a } => {
                let s = self.shape(a).to_vec();
                let (m, n) = (s[0], s[1]);
                let mut da = vec![T::zero(); m * n];
                for j in 0..n {
                    for i in 0..m {
                        da[i * n + j] = grad[j * m + i];
                    }
                }
                self.acc_owned(a, da);
            }

            Op::SplitHeads { a, heads } => {
                let s = self.shape(id).to_vec();
                let (m, d) = (s[1], s[2]);
                let mut da = vec![T::zero(); m * heads * d];
                for h in 0..heads {
                    for i in 0..m {
                        let src = h * m * d + i * d;
                        let dst = i * heads * d + h * d;
                        da[dst..dst + d].copy_from_slice(&grad[src..src + d]);
                    }
                }
                self.acc_owned(a, da);
            }

            Op::MergeHeads { a } => {
                let s = self.shape(a).to_vec();
                let (heads, m, d) = (s[0], s[1], s[2]);
                let mut da = vec![T::zero(); heads * m * d];
                for h in 0..heads {
                    for i in 0..m {
                        let dst = h * m * d + i * d;
                        let src = i * heads * d + h * d;
                        da[dst..dst + d].copy_from_slice(&grad[src..src + d]);
                    }
                }
                self.acc_owned(a, da);
            }

            Op::Rotary { a, positions, base } => {
                let s = self.shape(id).to_vec();
                let (heads, m, d) = (s[0], s[1], s[2]);
                // The transpose of a rotation is the rotation by the negated angle.
                let mut da = grad.to_vec();
                rotate_pairs(&mut da, heads, m, d, &positions, base, true);
                self.acc_owned(a, da);
            }

            Op::Dropout { a, mask, keep_scale } => {
                let scale = T::from_f64(keep_scale);
                let da: Vec<T> = grad
                    .iter()
                    .zip(&mask)
                    .map(|(&g, &keep)| if keep { g * scale } else { T::zero() })
                    .collect();
                self.acc_owned(a, da);
            }

            Op::Im2Col {
                a,
                kernel,
                stride,
                pad,
            } => {
                if self.needs(a) {
                    let s = self.shape(a).to_vec();
                    let (c, h, w) = (s[0], s[1], s[2]);
                    let out_h = (h + 2 * pad - kernel) / stride + 1;
                    let out_w = (w + 2 * pad - kernel) / stride + 1;
                    let row_len = c * kernel * kernel;
                    let mut da = vec![T::zero(); c * h * w];
                    for oy in 0..out_h {
                        for ox in 0..out_w {
                            let r = oy * out_w + ox;
                            for ch in 0..c {
                                for ky in 0..kernel {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..kernel {
                                        let ix = (ox * stride + kx) as isize - pad as isize;
                                        if ix < 0 || ix >= w as isize {
                                            continue;
                                        }
                                        let dst = ch * h * w + iy as usize * w + ix as usize;
                                        let src =
                                            r * row_len + ch * kernel * kernel + ky * kernel + kx;
                                        da[dst] = da[dst] + grad[src];
                                    }
                                }
                            }
                        }
                    }
                    self.acc_owned(a, da);
                }
            }

            Op::MeanRows { a } => {
                let s = self.shape(a).to_vec();
                let (m, c) = (s[0], s[1]);
                let inv = T::from_f64(1.0 / m as f64);
                let mut da = vec![T::zero(); m * c];
                for row in da.chunks_mut(c) {
                    for (o, &g) in row.iter_mut().zip(grad) {
                        *o = g * inv;
                    }
                }
                self.acc_owned(a, da);
            }

            Op::SumAll { a } => {
                let g = grad[0];
                let da = vec![g; self.tensor(a).numel()];
                self.acc_owned(a, da);
            }
        }
    }
}

// ── raw kernels ─────────────────────────────────────────────────────────

/// out[m,n] += a[m,k] · b[k,n]
fn acc_ab<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

/// out[m,n] += a[m,k] · b[n,k]ᵀ
fn acc_abt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                s = s + x * y;
            }
            *o = *o + s;
        }
    }
}

/// out[m,n] += a[k,m]ᵀ · b[k,n]
fn acc_atb<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

fn zip_map<T: Scalar>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn softmax_row<T: Scalar>(row: &mut [T]) {
    let max = row
        .iter()
        .fold(T::neg_infinity(), |a, &b| if b > a { b } else { a });
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

/// log-sum-exp of a row, computed in f64 for a stable loss.
fn row_lse<T: Scalar>(row: &[T]) -> f64 {
    let max = row
        .iter()
        .map(|v| v.as_f64())
        .fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|v| (v.as_f64() - max).exp()).sum();
    max + sum.ln()
}

fn row_moments<T: Scalar>(row: &[T], eps: f64) -> (T, T) {
    let d = T::from_f64(row.len() as f64);
    let mean = row.iter().fold(T::zero(), |a, &x| a + x) / d;
    let var = row
        .iter()
        .fold(T::zero(), |a, &x| a + (x - mean) * (x - mean))
        / d;
    let rstd = T::one() / (var + T::from_f64(eps)).sqrt();
    (mean, rstd)
}

fn gelu_val<T: Scalar>(x: T) -> T {
    // tanh approximation
    let c = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let k = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let inner = c * (x + k * x * x * x);
    half * x * (T::one() + inner.tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let k = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let inner = c * (x + k * x * x * x);
    let t = inner.tanh();
    let sech2 = T::one() - t * t;
    let dinner = c * (T::one() + three * k * x * x);
    half * (T::one() + t) + half * x * sech2 * dinner
}

/// Rotate consecutive coordinate pairs in place. `invert` applies the
/// transpose rotation (negated angle), used by the backward pass.
fn rotate_pairs<T: Scalar>(
    data: &mut [T],
    heads: usize,
    m: usize,
    d: usize,
    positions: &[usize],
    base: f64,
    invert: bool,
) {
    let half = d / 2;
    // Angles depend on (position, pair) only; precompute per row.
    for (i, &pos) in positions.iter().enumerate() {
        for j in 0..half {
            let theta = base.powf(-2.0 * j as f64 / d as f64);
            let mut angle = pos as f64 * theta;
            if invert {
                angle = -angle;
            }
            let (cos, sin) = (T::from_f64(angle.cos()), T::from_f64(angle.sin()));
            for h in 0..heads {
                let idx = h * m * d + i * d + 2 * j;
                let (x0, x1) = (data[idx], data[idx + 1]);
                data[idx] = x0 * cos - x1 * sin;
                data[idx + 1] = x0 * sin + x1 * cos;
            }
        }
    }
}
