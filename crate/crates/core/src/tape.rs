//! Reverse-mode differentiation over a recorded operation tape.
//!
//! Every forward op appends a node holding its value and enough saved state
//! for its vector-Jacobian product. [`Tape::backward`] walks the nodes in
//! reverse and deposits parameter gradients into a [`ParameterStore`].

use std::sync::Arc;

use crate::error::{DflatError, Result};
use crate::params::{ParamId, ParameterStore};
use crate::tensor::{self, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// A constant sparse linear map over rows: `out[r] = Σ w · in[src]`.
///
/// Gathers, permutations, window pooling and bilinear resampling are all
/// expressed this way; the same weights apply to every channel.
#[derive(Clone, Debug, PartialEq)]
pub struct RowMix {
    pub n_in: usize,
    pub rows: Vec<Vec<(usize, f64)>>,
}

impl RowMix {
    pub fn gather(n_in: usize, indices: &[usize]) -> Self {
        RowMix {
            n_in,
            rows: indices.iter().map(|&i| vec![(i, 1.0)]).collect(),
        }
    }

    pub fn n_out(&self) -> usize {
        self.rows.len()
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        if x.rows() != self.n_in {
            return Err(DflatError::shape("row_mix", x.dims(), &[self.n_in]));
        }
        let c = x.cols();
        let mut out = vec![0.0; self.rows.len() * c];
        for (r, terms) in self.rows.iter().enumerate() {
            let orow = &mut out[r * c..(r + 1) * c];
            for &(src, w) in terms {
                for (o, &v) in orow.iter_mut().zip(x.row(src)) {
                    *o += w * v;
                }
            }
        }
        Tensor::new(vec![self.rows.len(), c], out)
    }

    fn apply_transpose(&self, g: &Tensor) -> Tensor {
        let c = g.cols();
        let mut out = vec![0.0; self.n_in * c];
        for (r, terms) in self.rows.iter().enumerate() {
            let grow = g.row(r);
            for &(src, w) in terms {
                let orow = &mut out[src * c..(src + 1) * c];
                for (o, &v) in orow.iter_mut().zip(grow) {
                    *o += w * v;
                }
            }
        }
        Tensor::new(vec![self.n_in, c], out).expect("row mix dims")
    }
}

/// Which attention a batch of score evaluations belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScoreKind {
    /// Query-to-feature scores (row/column transformers or the dense baseline).
    Transformer,
    /// Row-to-column crossings of the interactive step.
    Interactive,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Transpose(Var),
    Relu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normed: Tensor,
        inv_std: Vec<f64>,
    },
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    ConcatRows(Vec<Var>),
    Mix(Var, Arc<RowMix>),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Tensor,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Labelled intermediate kept for inspection (attention maps).
#[derive(Clone, Debug)]
pub struct Tap {
    pub label: String,
    pub var: Var,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    transformer_scores: u64,
    interactive_scores: u64,
    record_taps: bool,
    taps: Vec<Tap>,
    softmax_fault: Option<f64>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Keeps labelled attention maps for later inspection.
    pub fn with_taps() -> Self {
        Tape {
            record_taps: true,
            ..Tape::default()
        }
    }

    /// Test hook: scales every gradient leaving a softmax by `1 + fault`.
    #[doc(hidden)]
    pub fn inject_softmax_fault(&mut self, fault: f64) {
        self.softmax_fault = Some(fault);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.dims()
    }

    pub fn record_scores(&mut self, kind: ScoreKind, pairs: u64) {
        match kind {
            ScoreKind::Transformer => self.transformer_scores += pairs,
            ScoreKind::Interactive => self.interactive_scores += pairs,
        }
    }

    pub fn score_count(&self, kind: ScoreKind) -> u64 {
        match kind {
            ScoreKind::Transformer => self.transformer_scores,
            ScoreKind::Interactive => self.interactive_scores,
        }
    }

    pub fn tap(&mut self, label: impl FnOnce() -> String, var: Var) {
        if self.record_taps {
            self.taps.push(Tap {
                label: label(),
                var,
            });
        }
    }

    /// Sign of every ReLU input on the tape, in recording order.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(a) => Some(self.value(a).data().iter().map(|v| *v > 0.0).collect::<Vec<_>>()),
                _ => None,
            })
            .flatten()
            .collect()
    }

    pub fn taps(&self) -> &[Tap] {
        &self.taps
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, store: &ParameterStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = tensor::matmul_nt(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::MatMulNT(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.dims(a) != self.dims(b) {
            return Err(DflatError::shape("add", self.dims(a), self.dims(b)));
        }
        let v = self.value(a).zip_with(self.value(b), |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b)))
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let n = self.value(a).cols();
        if self.value(bias).len() != n {
            return Err(DflatError::shape("add_bias", self.dims(a), self.dims(bias)));
        }
        let b = self.value(bias).data().to_vec();
        let mut v = self.value(a).clone();
        for row in v.data_mut().chunks_mut(n) {
            for (x, y) in row.iter_mut().zip(&b) {
                *x += y;
            }
        }
        Ok(self.push(v, Op::AddBias(a, bias)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.dims(a) != self.dims(b) {
            return Err(DflatError::shape("mul", self.dims(a), self.dims(b)));
        }
        let v = self.value(a).zip_with(self.value(b), |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = tensor::softmax_rows(self.value(a));
        self.push(v, Op::Softmax(a))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let out = tensor::layer_norm(self.value(x), self.value(gain), self.value(bias))?;
        let (normed, inv_std) = tensor::normalize_rows(self.value(x));
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                inv_std,
            },
        ))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        let (m, n) = (t.rows(), t.cols());
        if start + len > n || len == 0 {
            return Err(DflatError::shape("slice_cols", t.dims(), &[start, len]));
        }
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&t.row(i)[start..start + len]);
        }
        let v = Tensor::new(vec![m, len], out)?;
        Ok(self.push(v, Op::SliceCols(a, start)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = self.value(parts[0]).rows();
        if let Some(bad) = parts.iter().find(|&&p| self.value(p).rows() != m) {
            return Err(DflatError::shape("concat_cols", self.dims(parts[0]), self.dims(*bad)));
        }
        let n: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let v = Tensor::new(vec![m, n], out)?;
        Ok(self.push(v, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        let (m, n) = (t.rows(), t.cols());
        if start + len > m || len == 0 {
            return Err(DflatError::shape("slice_rows", t.dims(), &[start, len]));
        }
        let v = Tensor::new(vec![len, n], t.data()[start * n..(start + len) * n].to_vec())?;
        Ok(self.push(v, Op::SliceRows(a, start)))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.value(parts[0]).cols();
        if let Some(bad) = parts.iter().find(|&&p| self.value(p).cols() != n) {
            return Err(DflatError::shape("concat_rows", self.dims(parts[0]), self.dims(*bad)));
        }
        let mut out = Vec::new();
        let mut m = 0;
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
            m += self.value(p).rows();
        }
        let v = Tensor::new(vec![m, n], out)?;
        Ok(self.push(v, Op::ConcatRows(parts.to_vec())))
    }

    pub fn row_mix(&mut self, a: Var, mix: Arc<RowMix>) -> Result<Var> {
        let v = mix.apply(self.value(a))?;
        Ok(self.push(v, Op::Mix(a, mix)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    /// Mean over rows of `-log softmax(logits)[row, target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let l = self.value(logits);
        let c = l.cols();
        if l.rows() != targets.len() {
            return Err(DflatError::shape("cross_entropy", l.dims(), &[targets.len()]));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(DflatError::config(format!("target class {t} out of range 0..{c}")));
        }
        let probs = tensor::softmax_rows(l);
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = l.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
        }
        let v = Tensor::scalar(total / targets.len() as f64);
        Ok(self.push(
            v,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Parameter gradients of a scalar node, one entry per parameter leaf.
    pub fn gradients(&self, loss: Var) -> Result<Vec<(ParamId, Tensor)>> {
        if self.nodes.is_empty() {
            return Err(DflatError::State("backward called before any forward pass".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(DflatError::State(format!(
                "backward needs a scalar loss, got dims {:?}",
                self.dims(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::filled(self.dims(loss), 1.0));
        let mut out = Vec::new();
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => out.push((*id, g)),
                Op::MatMul(a, b) => {
                    let ga = tensor::matmul_nt(&g, self.value(*b))?;
                    let gb = tensor::matmul_tn(self.value(*a), &g)?;
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::MatMulNT(a, b) => {
                    let ga = tensor::matmul(&g, self.value(*b))?;
                    let gb = tensor::matmul_tn(&g, self.value(*a))?;
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::AddBias(a, bias) => {
                    let n = g.cols();
                    let mut gb = vec![0.0; n];
                    for row in g.data().chunks(n) {
                        for (s, v) in gb.iter_mut().zip(row) {
                            *s += v;
                        }
                    }
                    let gb = Tensor::new(self.dims(*bias).to_vec(), gb)?;
                    accumulate(&mut grads, *a, g);
                    accumulate(&mut grads, *bias, gb);
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_with(self.value(*b), |x, y| x * y);
                    let gb = g.zip_with(self.value(*a), |x, y| x * y);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Scale(a, c) => accumulate(&mut grads, *a, g.map(|x| x * c)),
                Op::Transpose(a) => accumulate(&mut grads, *a, g.transpose()),
                Op::Relu(a) => {
                    let ga = g.zip_with(self.value(*a), |x, y| if y > 0.0 { x } else { 0.0 });
                    accumulate(&mut grads, *a, ga);
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let n = y.cols();
                    let mut ga = g.clone();
                    for (grow, yrow) in ga.data_mut().chunks_mut(n).zip(y.data().chunks(n)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(x, y)| x * y).sum();
                        for (gv, &yv) in grow.iter_mut().zip(yrow) {
                            *gv = yv * (*gv - dot);
                        }
                    }
                    if let Some(f) = self.softmax_fault {
                        ga = ga.map(|x| x * (1.0 + f));
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    normed,
                    inv_std,
                } => {
                    let d = g.cols();
                    let gv = self.value(*gain).data();
                    let mut ggain = vec![0.0; d];
                    let mut gbias = vec![0.0; d];
                    let mut gx = vec![0.0; g.len()];
                    for (r, (grow, nrow)) in g.data().chunks(d).zip(normed.data().chunks(d)).enumerate() {
                        let mut mean_dn = 0.0;
                        let mut mean_dn_n = 0.0;
                        for k in 0..d {
                            ggain[k] += grow[k] * nrow[k];
                            gbias[k] += grow[k];
                            let dn = grow[k] * gv[k];
                            mean_dn += dn;
                            mean_dn_n += dn * nrow[k];
                        }
                        mean_dn /= d as f64;
                        mean_dn_n /= d as f64;
                        for k in 0..d {
                            let dn = grow[k] * gv[k];
                            gx[r * d + k] = inv_std[r] * (dn - mean_dn - nrow[k] * mean_dn_n);
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::new(g.dims().to_vec(), gx)?);
                    accumulate(&mut grads, *gain, Tensor::new(self.dims(*gain).to_vec(), ggain)?);
                    accumulate(&mut grads, *bias, Tensor::new(self.dims(*bias).to_vec(), gbias)?);
                }
                Op::SliceCols(a, start) => {
                    let src = self.value(*a);
                    let (m, n, len) = (src.rows(), src.cols(), g.cols());
                    let mut ga = vec![0.0; m * n];
                    for i in 0..m {
                        ga[i * n + start..i * n + start + len].copy_from_slice(g.row(i));
                    }
                    accumulate(&mut grads, *a, Tensor::new(src.dims().to_vec(), ga)?);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        let m = g.rows();
                        let mut gp = Vec::with_capacity(m * w);
                        for i in 0..m {
                            gp.extend_from_slice(&g.row(i)[offset..offset + w]);
                        }
                        offset += w;
                        accumulate(&mut grads, p, Tensor::new(self.dims(p).to_vec(), gp)?);
                    }
                }
                Op::SliceRows(a, start) => {
                    let src = self.value(*a);
                    let n = src.cols();
                    let mut ga = vec![0.0; src.len()];
                    ga[start * n..start * n + g.len()].copy_from_slice(g.data());
                    accumulate(&mut grads, *a, Tensor::new(src.dims().to_vec(), ga)?);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = self.value(p).len();
                        let gp = g.data()[offset..offset + len].to_vec();
                        offset += len;
                        accumulate(&mut grads, p, Tensor::new(self.dims(p).to_vec(), gp)?);
                    }
                }
                Op::Mix(a, mix) => accumulate(&mut grads, *a, mix.apply_transpose(&g)),
                Op::Sum(a) => {
                    let s = g.data()[0];
                    accumulate(&mut grads, *a, Tensor::filled(self.dims(*a), s));
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let scale = g.data()[0] / targets.len() as f64;
                    let mut gl = probs.clone();
                    let c = gl.cols();
                    for (i, &t) in targets.iter().enumerate() {
                        gl.data_mut()[i * c + t] -= 1.0;
                    }
                    accumulate(&mut grads, *logits, gl.map(|x| x * scale));
                }
            }
        }
        out.reverse();
        Ok(out)
    }

    /// Adds `∂loss/∂p` into every parameter's gradient buffer.
    pub fn backward(&self, loss: Var, store: &mut ParameterStore) -> Result<()> {
        for (id, g) in self.gradients(loss)? {
            store.accumulate_grad(id, &g);
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
