//! Reverse-mode differentiation over a fixed operation set.
//!
//! A [`Tape`] records every operation in execution order together with the
//! forward values the backward rule needs. [`Tape::backward`] walks the
//! record in reverse and returns gradients for every node that depends on a
//! parameter. Scalars are 1×1 matrices.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::Rng as _;

use super::{DenseMatrix, Rng, SparseMatrix};
use crate::error::{Error, Result};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

/// Whether stochastic layers are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    SpMM {
        pattern: Arc<SparseMatrix>,
        values: Option<usize>,
        dense: usize,
    },
    EdgeScores {
        pattern: Arc<SparseMatrix>,
        src: usize,
        dst: usize,
    },
    RowSoftmax {
        pattern: Arc<SparseMatrix>,
        input: usize,
    },
    Add(usize, usize),
    AddRow(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    LeakyRelu(usize, f64),
    Dropout(usize, Vec<f64>),
    ConcatCols(Vec<usize>),
    GatherRows(usize, Vec<usize>),
    Sum(usize),
    CrossEntropy {
        logits: usize,
        rows: Vec<usize>,
        labels: Vec<usize>,
        probs: DenseMatrix,
    },
    SoftCrossEntropy {
        logits: usize,
        targets: DenseMatrix,
        probs: DenseMatrix,
    },
    IrmScaleGrad {
        logits: usize,
        rows: Vec<usize>,
        labels: Vec<usize>,
        probs: DenseMatrix,
    },
}

#[derive(Debug)]
struct Node {
    value: DenseMatrix,
    op: Op,
    needs_grad: bool,
}

/// Single-owner operation record.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<DenseMatrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient for `v`; all zeros when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Result<DenseMatrix> {
        if v.tape != self.tape || v.index >= self.grads.len() {
            return Err(Error::Usage("variable does not belong to this tape".into()));
        }
        Ok(match &self.grads[v.index] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.index];
                DenseMatrix::zeros(r, c)
            }
        })
    }
}

/// Softmax of the selected rows of `z`, one output row per selected row.
fn softmax_rows(z: &DenseMatrix, rows: impl Iterator<Item = usize>) -> DenseMatrix {
    let c = z.cols();
    let rows: Vec<usize> = rows.collect();
    let mut p = DenseMatrix::zeros(rows.len(), c);
    for (k, &r) in rows.iter().enumerate() {
        let row = z.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let out = p.row_mut(k);
        let mut total = 0.0;
        for (o, &v) in out.iter_mut().zip(row) {
            *o = (v - max).exp();
            total += *o;
        }
        for o in out.iter_mut() {
            *o /= total;
        }
    }
    p
}

/// `log Σ exp(row)` with max subtraction.
fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = row.iter().map(|&v| (v - max).exp()).sum();
    max + s.ln()
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::Usage("variable does not belong to this tape".into()));
        }
        Ok(v.index)
    }

    fn push(&mut self, value: DenseMatrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn needs(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, m: DenseMatrix) -> Var {
        self.push(m, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, m: DenseMatrix) -> Var {
        self.push(m, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &DenseMatrix {
        assert_eq!(v.tape, self.id, "variable from another tape");
        &self.nodes[v.index].value
    }

    /// Value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.shape(), (1, 1), "not a scalar");
        m.get(0, 0)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let value = self.nodes[ia].value.matmul(&self.nodes[ib].value)?;
        let ng = self.needs(ia) || self.needs(ib);
        Ok(self.push(value, Op::MatMul(ia, ib), ng))
    }

    /// `S · d` with the pattern's own (constant) values.
    pub fn spmm(&mut self, s: &Arc<SparseMatrix>, d: Var) -> Result<Var> {
        let id = self.idx(d)?;
        let value = s.spmm(&self.nodes[id].value)?;
        let ng = self.needs(id);
        Ok(self.push(
            value,
            Op::SpMM {
                pattern: Arc::clone(s),
                values: None,
                dense: id,
            },
            ng,
        ))
    }

    /// `S · d` where the entries of `S` come from `values` (an nnz×1 node).
    pub fn spmm_values(&mut self, pattern: &Arc<SparseMatrix>, values: Var, d: Var) -> Result<Var> {
        let (iv, id) = (self.idx(values)?, self.idx(d)?);
        let vals = &self.nodes[iv].value;
        if vals.shape() != (pattern.nnz(), 1) {
            return Err(Error::shape("spmm_values", (pattern.nnz(), 1), vals.shape()));
        }
        let value = pattern.spmm_with(vals.as_slice(), &self.nodes[id].value)?;
        let ng = self.needs(iv) || self.needs(id);
        Ok(self.push(
            value,
            Op::SpMM {
                pattern: Arc::clone(pattern),
                values: Some(iv),
                dense: id,
            },
            ng,
        ))
    }

    /// Per-edge score `src[i] + dst[j]` for every stored entry `(i, j)`.
    /// Both inputs are N×1; the result is nnz×1.
    pub fn edge_scores(&mut self, pattern: &Arc<SparseMatrix>, src: Var, dst: Var) -> Result<Var> {
        let (is, id) = (self.idx(src)?, self.idx(dst)?);
        let (s, t) = (&self.nodes[is].value, &self.nodes[id].value);
        if s.shape() != (pattern.rows(), 1) {
            return Err(Error::shape("edge_scores", (pattern.rows(), 1), s.shape()));
        }
        if t.shape() != (pattern.cols(), 1) {
            return Err(Error::shape("edge_scores", (pattern.cols(), 1), t.shape()));
        }
        let mut out = Vec::with_capacity(pattern.nnz());
        for r in 0..pattern.rows() {
            for k in pattern.row_range(r) {
                out.push(s.get(r, 0) + t.get(pattern.col_idx()[k], 0));
            }
        }
        let value = DenseMatrix::from_vec(out.len(), 1, out)?;
        let ng = self.needs(is) || self.needs(id);
        Ok(self.push(
            value,
            Op::EdgeScores {
                pattern: Arc::clone(pattern),
                src: is,
                dst: id,
            },
            ng,
        ))
    }

    /// Softmax of nnz×1 scores within each row of `pattern`.
    pub fn masked_row_softmax(&mut self, pattern: &Arc<SparseMatrix>, scores: Var) -> Result<Var> {
        let i = self.idx(scores)?;
        let x = &self.nodes[i].value;
        if x.cols() != 1 {
            return Err(Error::shape("masked_row_softmax", (pattern.nnz(), 1), x.shape()));
        }
        let vals = pattern.row_softmax_values(x.as_slice())?;
        let value = DenseMatrix::from_vec(vals.len(), 1, vals)?;
        let ng = self.needs(i);
        Ok(self.push(
            value,
            Op::RowSoftmax {
                pattern: Arc::clone(pattern),
                input: i,
            },
            ng,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let value = self.nodes[ia].value.add(&self.nodes[ib].value)?;
        let ng = self.needs(ia) || self.needs(ib);
        Ok(self.push(value, Op::Add(ia, ib), ng))
    }

    /// Adds the 1×d row `bias` to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(bias)?);
        let (x, b) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if b.rows() != 1 || b.cols() != x.cols() {
            return Err(Error::shape("add_row", x.shape(), b.shape()));
        }
        let mut value = x.clone();
        for r in 0..value.rows() {
            for (o, &bv) in value.row_mut(r).iter_mut().zip(b.as_slice()) {
                *o += bv;
            }
        }
        let ng = self.needs(ia) || self.needs(ib);
        Ok(self.push(value, Op::AddRow(ia, ib), ng))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let value = self.nodes[ia]
            .value
            .zip_with(&self.nodes[ib].value, "mul", |x, y| x * y)?;
        let ng = self.needs(ia) || self.needs(ib);
        Ok(self.push(value, Op::Mul(ia, ib), ng))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        let ia = self.idx(a)?;
        let value = self.nodes[ia].value.scale(k);
        let ng = self.needs(ia);
        Ok(self.push(value, Op::Scale(ia, k), ng))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let value = self.nodes[ia].value.map(|v| if v > 0.0 { v } else { 0.0 });
        let ng = self.needs(ia);
        Ok(self.push(value, Op::Relu(ia), ng))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        let ia = self.idx(a)?;
        let value = self.nodes[ia]
            .value
            .map(|v| if v > 0.0 { v } else { slope * v });
        let ng = self.needs(ia);
        Ok(self.push(value, Op::LeakyRelu(ia, slope), ng))
    }

    /// Inverted dropout. Identity in eval mode or at rate 0.
    pub fn dropout(&mut self, a: Var, rate: f64, mode: Mode, rng: &mut Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        let ia = self.idx(a)?;
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - rate);
        let x = &self.nodes[ia].value;
        let mask: Vec<f64> = (0..x.len())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let data = x.as_slice().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = DenseMatrix::from_vec(x.rows(), x.cols(), data)?;
        let ng = self.needs(ia);
        Ok(self.push(value, Op::Dropout(ia, mask), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let idx: Vec<usize> = parts.iter().map(|&p| self.idx(p)).collect::<Result<_>>()?;
        let Some(&first) = idx.first() else {
            return Err(Error::Usage("concat of zero matrices".into()));
        };
        let rows = self.nodes[first].value.rows();
        for &i in &idx {
            let s = self.nodes[i].value.shape();
            if s.0 != rows {
                return Err(Error::shape("concat_cols", (rows, 0), s));
            }
        }
        let cols: usize = idx.iter().map(|&i| self.nodes[i].value.cols()).sum();
        let mut value = DenseMatrix::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &i in &idx {
                let src = self.nodes[i].value.row(r);
                value.row_mut(r)[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        let ng = idx.iter().any(|&i| self.needs(i));
        Ok(self.push(value, Op::ConcatCols(idx), ng))
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let ia = self.idx(a)?;
        let x = &self.nodes[ia].value;
        if let Some(&bad) = rows.iter().find(|&&r| r >= x.rows()) {
            return Err(Error::shape("gather_rows", x.shape(), (bad, 0)));
        }
        let value = x.gather_rows(rows);
        let ng = self.needs(ia);
        Ok(self.push(value, Op::GatherRows(ia, rows.to_vec()), ng))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let value = DenseMatrix::filled(1, 1, self.nodes[ia].value.sum());
        let ng = self.needs(ia);
        Ok(self.push(value, Op::Sum(ia), ng))
    }

    fn check_labels(z: &DenseMatrix, rows: &[usize], labels: &[usize]) -> Result<()> {
        if rows.is_empty() {
            return Err(Error::Protocol("loss over an empty node mask".into()));
        }
        if rows.len() != labels.len() {
            return Err(Error::shape("cross_entropy", (rows.len(), 1), (labels.len(), 1)));
        }
        if let Some(&r) = rows.iter().find(|&&r| r >= z.rows()) {
            return Err(Error::shape("cross_entropy", z.shape(), (r, 0)));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= z.cols()) {
            return Err(Error::Data(format!(
                "label {y} out of range for {} classes",
                z.cols()
            )));
        }
        Ok(())
    }

    /// Mean negative log-likelihood of `labels[k]` under row `rows[k]` of
    /// the logits.
    pub fn cross_entropy(&mut self, logits: Var, rows: &[usize], labels: &[usize]) -> Result<Var> {
        let il = self.idx(logits)?;
        let z = &self.nodes[il].value;
        Self::check_labels(z, rows, labels)?;
        let mut total = 0.0;
        for (&r, &y) in rows.iter().zip(labels) {
            let row = z.row(r);
            total += log_sum_exp(row) - row[y];
        }
        let probs = softmax_rows(z, rows.iter().copied());
        let value = DenseMatrix::filled(1, 1, total / rows.len() as f64);
        let ng = self.needs(il);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits: il,
                rows: rows.to_vec(),
                labels: labels.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Mean cross-entropy of every logits row against a soft target row.
    pub fn soft_cross_entropy(&mut self, logits: Var, targets: &DenseMatrix) -> Result<Var> {
        let il = self.idx(logits)?;
        let z = &self.nodes[il].value;
        if z.shape() != targets.shape() {
            return Err(Error::shape("soft_cross_entropy", z.shape(), targets.shape()));
        }
        if z.rows() == 0 {
            return Err(Error::Protocol("loss over an empty node mask".into()));
        }
        let mut total = 0.0;
        for r in 0..z.rows() {
            let row = z.row(r);
            let lse = log_sum_exp(row);
            for (&v, &t) in row.iter().zip(targets.row(r)) {
                total += t * (lse - v);
            }
        }
        let probs = softmax_rows(z, 0..z.rows());
        let value = DenseMatrix::filled(1, 1, total / z.rows() as f64);
        let ng = self.needs(il);
        Ok(self.push(
            value,
            Op::SoftCrossEntropy {
                logits: il,
                targets: targets.clone(),
                probs,
            },
            ng,
        ))
    }

    /// Derivative of the masked cross-entropy of `w · logits` with respect to
    /// the scalar `w`, evaluated at `w = 1`.
    pub fn irm_scale_grad(&mut self, logits: Var, rows: &[usize], labels: &[usize]) -> Result<Var> {
        let il = self.idx(logits)?;
        let z = &self.nodes[il].value;
        Self::check_labels(z, rows, labels)?;
        let probs = softmax_rows(z, rows.iter().copied());
        let mut total = 0.0;
        for (k, (&r, &y)) in rows.iter().zip(labels).enumerate() {
            let row = z.row(r);
            let mean: f64 = probs.row(k).iter().zip(row).map(|(p, v)| p * v).sum();
            total += mean - row[y];
        }
        let value = DenseMatrix::filled(1, 1, total / rows.len() as f64);
        let ng = self.needs(il);
        Ok(self.push(
            value,
            Op::IrmScaleGrad {
                logits: il,
                rows: rows.to_vec(),
                labels: labels.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Reverse pass from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let il = self.idx(loss)?;
        if self.nodes[il].value.shape() != (1, 1) {
            return Err(Error::Usage(format!(
                "backward from a non-scalar {:?}",
                self.nodes[il].value.shape()
            )));
        }
        let mut grads: Vec<Option<DenseMatrix>> = vec![None; self.nodes.len()];
        grads[il] = Some(DenseMatrix::filled(1, 1, 1.0));

        for i in (0..=il).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients {
            tape: self.id,
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }

    fn deposit(&self, grads: &mut [Option<DenseMatrix>], i: usize, g: DenseMatrix) {
        if !self.nodes[i].needs_grad {
            return;
        }
        match &mut grads[i] {
            Some(acc) => acc.accumulate(&g),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, g: &DenseMatrix, grads: &mut [Option<DenseMatrix>]) -> Result<()> {
        let val = |k: usize| &self.nodes[k].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    self.deposit(grads, *a, g.matmul_t(val(*b))?);
                }
                if self.needs(*b) {
                    self.deposit(grads, *b, val(*a).t_matmul(g)?);
                }
            }
            Op::SpMM {
                pattern,
                values,
                dense,
            } => {
                let vals = match values {
                    Some(v) => val(*v).as_slice(),
                    None => pattern.values(),
                };
                if self.needs(*dense) {
                    self.deposit(grads, *dense, pattern.spmm_transpose_with(vals, g));
                }
                if let Some(v) = values {
                    if self.needs(*v) {
                        let d = val(*dense);
                        let mut gv = Vec::with_capacity(pattern.nnz());
                        for r in 0..pattern.rows() {
                            let g_row = g.row(r);
                            for k in pattern.row_range(r) {
                                let d_row = d.row(pattern.col_idx()[k]);
                                gv.push(g_row.iter().zip(d_row).map(|(a, b)| a * b).sum());
                            }
                        }
                        self.deposit(grads, *v, DenseMatrix::from_vec(gv.len(), 1, gv)?);
                    }
                }
            }
            Op::EdgeScores { pattern, src, dst } => {
                let mut gs = DenseMatrix::zeros(pattern.rows(), 1);
                let mut gd = DenseMatrix::zeros(pattern.cols(), 1);
                for r in 0..pattern.rows() {
                    for k in pattern.row_range(r) {
                        let c = pattern.col_idx()[k];
                        let gk = g.get(k, 0);
                        gs.set(r, 0, gs.get(r, 0) + gk);
                        gd.set(c, 0, gd.get(c, 0) + gk);
                    }
                }
                self.deposit(grads, *src, gs);
                self.deposit(grads, *dst, gd);
            }
            Op::RowSoftmax { pattern, input } => {
                let y = self.nodes[i].value.as_slice();
                let mut gx = vec![0.0; y.len()];
                for r in 0..pattern.rows() {
                    let range = pattern.row_range(r);
                    let dot: f64 = range.clone().map(|k| y[k] * g.get(k, 0)).sum();
                    for k in range {
                        gx[k] = y[k] * (g.get(k, 0) - dot);
                    }
                }
                self.deposit(grads, *input, DenseMatrix::from_vec(gx.len(), 1, gx)?);
            }
            Op::Add(a, b) => {
                self.deposit(grads, *a, g.clone());
                self.deposit(grads, *b, g.clone());
            }
            Op::AddRow(a, b) => {
                self.deposit(grads, *a, g.clone());
                let mut gb = DenseMatrix::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (o, &v) in gb.as_mut_slice().iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                self.deposit(grads, *b, gb);
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    self.deposit(grads, *a, g.zip_with(val(*b), "mul", |x, y| x * y)?);
                }
                if self.needs(*b) {
                    self.deposit(grads, *b, g.zip_with(val(*a), "mul", |x, y| x * y)?);
                }
            }
            Op::Scale(a, k) => self.deposit(grads, *a, g.scale(*k)),
            Op::Relu(a) => {
                let gx = g.zip_with(val(*a), "relu", |gv, x| if x > 0.0 { gv } else { 0.0 })?;
                self.deposit(grads, *a, gx);
            }
            Op::LeakyRelu(a, slope) => {
                let s = *slope;
                let gx = g.zip_with(val(*a), "leaky_relu", |gv, x| if x > 0.0 { gv } else { s * gv })?;
                self.deposit(grads, *a, gx);
            }
            Op::Dropout(a, mask) => {
                let data = g.as_slice().iter().zip(mask).map(|(x, m)| x * m).collect();
                self.deposit(grads, *a, DenseMatrix::from_vec(g.rows(), g.cols(), data)?);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = val(p).cols();
                    if self.needs(p) {
                        self.deposit(grads, p, g.slice_cols(off, w));
                    }
                    off += w;
                }
            }
            Op::GatherRows(a, rows) => {
                let x = val(*a);
                let mut gx = DenseMatrix::zeros(x.rows(), x.cols());
                for (k, &r) in rows.iter().enumerate() {
                    for (o, &v) in gx.row_mut(r).iter_mut().zip(g.row(k)) {
                        *o += v;
                    }
                }
                self.deposit(grads, *a, gx);
            }
            Op::Sum(a) => {
                let (r, c) = val(*a).shape();
                self.deposit(grads, *a, DenseMatrix::filled(r, c, g.get(0, 0)));
            }
            Op::CrossEntropy {
                logits,
                rows,
                labels,
                probs,
            } => {
                let z = val(*logits);
                let scale = g.get(0, 0) / rows.len() as f64;
                let mut gz = DenseMatrix::zeros(z.rows(), z.cols());
                for (k, (&r, &y)) in rows.iter().zip(labels).enumerate() {
                    let out = gz.row_mut(r);
                    for (j, &p) in probs.row(k).iter().enumerate() {
                        let t = if j == y { 1.0 } else { 0.0 };
                        out[j] += scale * (p - t);
                    }
                }
                self.deposit(grads, *logits, gz);
            }
            Op::SoftCrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let scale = g.get(0, 0) / targets.rows() as f64;
                let gz = probs.zip_with(targets, "soft_cross_entropy", |p, t| scale * (p - t))?;
                self.deposit(grads, *logits, gz);
            }
            Op::IrmScaleGrad {
                logits,
                rows,
                labels,
                probs,
            } => {
                let z = val(*logits);
                let scale = g.get(0, 0) / rows.len() as f64;
                let mut gz = DenseMatrix::zeros(z.rows(), z.cols());
                for (k, (&r, &y)) in rows.iter().zip(labels).enumerate() {
                    let p = probs.row(k);
                    let zr = z.row(r);
                    let mean: f64 = p.iter().zip(zr).map(|(a, b)| a * b).sum();
                    let out = gz.row_mut(r);
                    for j in 0..p.len() {
                        let t = if j == y { 1.0 } else { 0.0 };
                        out[j] += scale * (p[j] * (1.0 + zr[j] - mean) - t);
                    }
                }
                self.deposit(grads, *logits, gz);
            }
        }
        Ok(())
    }
}
