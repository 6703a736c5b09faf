use serde::{Deserialize, Serialize};

use super::DenseMatrix;
use crate::error::{Error, Result};

/// Compressed-sparse-row matrix.
///
/// Column indices are strictly increasing inside every row and all stored
/// values are finite. The stored pattern is shared between the normalized
/// adjacency and the attention matrices built on it, so most kernels here
/// also accept an external value slice laid out along the same pattern.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseMatrix {
    rows: usize,
    cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    pub fn new(
        rows: usize,
        cols: usize,
        row_ptr: Vec<usize>,
        col_idx: Vec<usize>,
        values: Vec<f64>,
    ) -> Result<Self> {
        if row_ptr.len() != rows + 1 || row_ptr[0] != 0 {
            return Err(Error::Data(format!(
                "row_ptr must have {} entries starting at 0",
                rows + 1
            )));
        }
        let nnz = row_ptr[rows];
        if col_idx.len() != nnz || values.len() != nnz {
            return Err(Error::Data(format!(
                "row_ptr declares {nnz} entries, col_idx has {}, values has {}",
                col_idx.len(),
                values.len()
            )));
        }
        for r in 0..rows {
            if row_ptr[r] > row_ptr[r + 1] {
                return Err(Error::Data(format!("row_ptr decreases at row {r}")));
            }
            let cols_r = &col_idx[row_ptr[r]..row_ptr[r + 1]];
            for (k, &c) in cols_r.iter().enumerate() {
                if c >= cols {
                    return Err(Error::Data(format!("column {c} out of range in row {r}")));
                }
                if k > 0 && cols_r[k - 1] >= c {
                    return Err(Error::Data(format!(
                        "column indices not strictly increasing in row {r}"
                    )));
                }
            }
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite stored value {v}")));
        }
        Ok(SparseMatrix {
            rows,
            cols,
            row_ptr,
            col_idx,
            values,
        })
    }

    /// Builds from `(row, col, value)` triplets. Duplicates are summed.
    pub fn from_triplets(rows: usize, cols: usize, triplets: &[(usize, usize, f64)]) -> Result<Self> {
        let mut sorted = triplets.to_vec();
        sorted.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut row_ptr = vec![0usize; rows + 1];
        let mut col_idx = Vec::with_capacity(sorted.len());
        let mut values: Vec<f64> = Vec::with_capacity(sorted.len());
        let mut last: Option<(usize, usize)> = None;
        for &(r, c, v) in &sorted {
            if r >= rows || c >= cols {
                return Err(Error::Data(format!(
                    "entry ({r}, {c}) outside {rows}x{cols}"
                )));
            }
            if last == Some((r, c)) {
                *values.last_mut().expect("previous entry") += v;
                continue;
            }
            row_ptr[r + 1] += 1;
            col_idx.push(c);
            values.push(v);
            last = Some((r, c));
        }
        for r in 0..rows {
            row_ptr[r + 1] += row_ptr[r];
        }
        SparseMatrix::new(rows, cols, row_ptr, col_idx, values)
    }

    pub fn identity(n: usize) -> Self {
        SparseMatrix {
            rows: n,
            cols: n,
            row_ptr: (0..=n).collect(),
            col_idx: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    #[inline]
    pub fn row_ptr(&self) -> &[usize] {
        &self.row_ptr
    }

    #[inline]
    pub fn col_idx(&self) -> &[usize] {
        &self.col_idx
    }

    #[inline]
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn row_range(&self, r: usize) -> std::ops::Range<usize> {
        self.row_ptr[r]..self.row_ptr[r + 1]
    }

    /// Row index of every stored entry, in storage order.
    pub fn row_of_entries(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.nnz());
        for r in 0..self.rows {
            out.extend(std::iter::repeat(r).take(self.row_ptr[r + 1] - self.row_ptr[r]));
        }
        out
    }

    /// Stored value at `(r, c)`, zero if not in the pattern.
    pub fn get(&self, r: usize, c: usize) -> f64 {
        let range = self.row_range(r);
        match self.col_idx[range.clone()].binary_search(&c) {
            Ok(k) => self.values[range.start + k],
            Err(_) => 0.0,
        }
    }

    /// Same pattern, new values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        if values.len() != self.nnz() {
            return Err(Error::shape("with_values", (self.nnz(), 1), (values.len(), 1)));
        }
        Ok(SparseMatrix {
            rows: self.rows,
            cols: self.cols,
            row_ptr: self.row_ptr.clone(),
            col_idx: self.col_idx.clone(),
            values,
        })
    }

    pub fn same_pattern(&self, other: &SparseMatrix) -> bool {
        self.rows == other.rows
            && self.cols == other.cols
            && self.row_ptr == other.row_ptr
            && self.col_idx == other.col_idx
    }

    pub fn to_dense(&self) -> DenseMatrix {
        let mut d = DenseMatrix::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            for k in self.row_range(r) {
                d.set(r, self.col_idx[k], self.values[k]);
            }
        }
        d
    }

    pub fn is_symmetric(&self) -> bool {
        if self.rows != self.cols {
            return false;
        }
        for r in 0..self.rows {
            for k in self.row_range(r) {
                let c = self.col_idx[k];
                let range = self.row_range(c);
                match self.col_idx[range.clone()].binary_search(&r) {
                    Ok(m) if self.values[range.start + m] == self.values[k] => {}
                    _ => return false,
                }
            }
        }
        true
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.rows)
            .map(|r| self.values[self.row_range(r)].iter().sum())
            .collect()
    }

    /// Sparse-dense product using the stored values.
    pub fn spmm(&self, d: &DenseMatrix) -> Result<DenseMatrix> {
        self.spmm_with(&self.values, d)
    }

    /// Sparse-dense product along this pattern with externally supplied
    /// values. Accumulates in ascending column order, which makes the result
    /// bit-identical to `to_dense().matmul(d)`.
    pub fn spmm_with(&self, values: &[f64], d: &DenseMatrix) -> Result<DenseMatrix> {
        if self.cols != d.rows() {
            return Err(Error::shape("spmm", self.shape(), d.shape()));
        }
        if values.len() != self.nnz() {
            return Err(Error::shape("spmm", (self.nnz(), 1), (values.len(), 1)));
        }
        let n = d.cols();
        let mut out = DenseMatrix::zeros(self.rows, n);
        for r in 0..self.rows {
            let o_row = out.row_mut(r);
            for k in self.row_range(r) {
                let v = values[k];
                for (o, &x) in o_row.iter_mut().zip(d.row(self.col_idx[k])) {
                    *o += v * x;
                }
            }
        }
        Ok(out)
    }

    /// `Sᵀ · g` for the pattern with the given values.
    pub(crate) fn spmm_transpose_with(&self, values: &[f64], g: &DenseMatrix) -> DenseMatrix {
        let n = g.cols();
        let mut out = DenseMatrix::zeros(self.cols, n);
        for r in 0..self.rows {
            let g_row = g.row(r);
            for k in self.row_range(r) {
                let v = values[k];
                let o_row = out.row_mut(self.col_idx[k]);
                for (o, &x) in o_row.iter_mut().zip(g_row) {
                    *o += v * x;
                }
            }
        }
        out
    }

    /// Softmax over the stored entries of each row, using `scores` as the
    /// per-entry logits. Every row must hold at least one entry.
    pub fn masked_row_softmax(&self, scores: &[f64]) -> Result<SparseMatrix> {
        let values = self.row_softmax_values(scores)?;
        self.with_values(values)
    }

    pub(crate) fn row_softmax_values(&self, scores: &[f64]) -> Result<Vec<f64>> {
        if scores.len() != self.nnz() {
            return Err(Error::shape("masked_row_softmax", (self.nnz(), 1), (scores.len(), 1)));
        }
        let mut out = vec![0.0; scores.len()];
        for r in 0..self.rows {
            let range = self.row_range(r);
            if range.is_empty() {
                return Err(Error::Data(format!(
                    "masked softmax over empty row {r}; the pattern must carry self-loops"
                )));
            }
            let row = &scores[range.clone()];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (o, &s) in out[range.clone()].iter_mut().zip(row) {
                *o = (s - max).exp();
                total += *o;
            }
            for o in &mut out[range] {
                *o /= total;
            }
        }
        Ok(out)
    }
}
