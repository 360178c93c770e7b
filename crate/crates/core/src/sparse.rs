//! Compressed sparse column storage for symmetric and rectangular matrices.
//!
//! Symmetric matrices keep both triangles so that matrix-vector products,
//! permutations and graph algorithms can read a column without searching.
//! Explicit zeros are retained: a pattern built from the same triplet
//! positions is identical regardless of the values, which lets a symbolic
//! factorization be reused across hyperparameter values.

use std::io::Write;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Accumulates `(row, col, value)` entries; duplicates are summed on compression.
#[derive(Debug, Clone, Default)]
pub struct Triplets {
    nrows: usize,
    ncols: usize,
    entries: Vec<(usize, usize, f64)>,
}

impl Triplets {
    pub fn new(nrows: usize, ncols: usize) -> Self {
        Self {
            nrows,
            ncols,
            entries: Vec::new(),
        }
    }

    pub fn with_capacity(nrows: usize, ncols: usize, cap: usize) -> Self {
        Self {
            nrows,
            ncols,
            entries: Vec::with_capacity(cap),
        }
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn push(&mut self, row: usize, col: usize, value: f64) {
        debug_assert!(row < self.nrows && col < self.ncols);
        self.entries.push((row, col, value));
    }

    /// Adds `value` at `(i, j)` and `(j, i)`; a diagonal entry is added once.
    pub fn push_sym(&mut self, i: usize, j: usize, value: f64) {
        self.push(i, j, value);
        if i != j {
            self.push(j, i, value);
        }
    }

    pub fn entries(&self) -> &[(usize, usize, f64)] {
        &self.entries
    }

    pub fn to_csc(&self) -> CscMatrix {
        CscMatrix::from_entries(self.nrows, self.ncols, &self.entries)
    }

    /// Compresses into a symmetric matrix. The caller is responsible for
    /// having pushed a symmetric pattern (e.g. through [`push_sym`](Self::push_sym)).
    pub fn to_sym(&self) -> Result<SymMatrix> {
        if self.nrows != self.ncols {
            return Err(Error::InvalidInput(format!(
                "symmetric matrix must be square, got {}x{}",
                self.nrows, self.ncols
            )));
        }
        SymMatrix::from_csc(self.to_csc())
    }
}

/// General sparse matrix in compressed sparse column form with sorted row indices.
#[derive(Debug, Clone, PartialEq)]
pub struct CscMatrix {
    nrows: usize,
    ncols: usize,
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CscMatrix {
    fn from_entries(nrows: usize, ncols: usize, entries: &[(usize, usize, f64)]) -> Self {
        let mut counts = vec![0usize; ncols + 1];
        for &(_, c, _) in entries {
            counts[c + 1] += 1;
        }
        for c in 0..ncols {
            counts[c + 1] += counts[c];
        }
        let mut next = counts.clone();
        let mut rows = vec![0usize; entries.len()];
        let mut vals = vec![0f64; entries.len()];
        for &(r, c, v) in entries {
            let p = next[c];
            rows[p] = r;
            vals[p] = v;
            next[c] += 1;
        }
        let mut col_ptr = Vec::with_capacity(ncols + 1);
        let mut row_idx = Vec::with_capacity(entries.len());
        let mut values = Vec::with_capacity(entries.len());
        col_ptr.push(0);
        let mut order: Vec<usize> = Vec::new();
        for c in 0..ncols {
            order.clear();
            order.extend(counts[c]..counts[c + 1]);
            order.sort_by_key(|&p| rows[p]);
            let mut last = usize::MAX;
            for &p in &order {
                if rows[p] == last {
                    *values.last_mut().unwrap() += vals[p];
                } else {
                    row_idx.push(rows[p]);
                    values.push(vals[p]);
                    last = rows[p];
                }
            }
            col_ptr.push(row_idx.len());
        }
        Self {
            nrows,
            ncols,
            col_ptr,
            row_idx,
            values,
        }
    }

    pub fn identity(n: usize) -> Self {
        Self {
            nrows: n,
            ncols: n,
            col_ptr: (0..=n).collect(),
            row_idx: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        let mut m = Self::identity(diag.len());
        m.values.copy_from_slice(diag);
        m
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn col_ptr(&self) -> &[usize] {
        &self.col_ptr
    }

    pub fn row_idx(&self) -> &[usize] {
        &self.row_idx
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Iterator over `(row, value)` of column `j`.
    pub fn column(&self, j: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.col_ptr[j]..self.col_ptr[j + 1];
        self.row_idx[range.clone()]
            .iter()
            .copied()
            .zip(self.values[range].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let range = self.col_ptr[j]..self.col_ptr[j + 1];
        match self.row_idx[range.clone()].binary_search(&i) {
            Ok(k) => self.values[range.start + k],
            Err(_) => 0.0,
        }
    }

    /// `y = A x`
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.ncols);
        let mut y = vec![0.0; self.nrows];
        for (j, &xj) in x.iter().enumerate() {
            if xj == 0.0 {
                continue;
            }
            for (i, v) in self.column(j) {
                y[i] += v * xj;
            }
        }
        y
    }

    /// `y = Aᵀ x`
    pub fn tr_mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.nrows);
        (0..self.ncols)
            .map(|j| self.column(j).map(|(i, v)| v * x[i]).sum())
            .collect()
    }

    pub fn transpose(&self) -> CscMatrix {
        let mut t = Triplets::with_capacity(self.ncols, self.nrows, self.nnz());
        for j in 0..self.ncols {
            for (i, v) in self.column(j) {
                t.push(j, i, v);
            }
        }
        t.to_csc()
    }

    /// Row-oriented view: for each row, the `(col, value)` pairs.
    pub fn rows(&self) -> Vec<Vec<(usize, f64)>> {
        let mut rows = vec![Vec::new(); self.nrows];
        for j in 0..self.ncols {
            for (i, v) in self.column(j) {
                rows[i].push((j, v));
            }
        }
        rows
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut d = DMatrix::zeros(self.nrows, self.ncols);
        for j in 0..self.ncols {
            for (i, v) in self.column(j) {
                d[(i, j)] += v;
            }
        }
        d
    }

    pub fn write_matrix_market<W: Write>(&self, mut w: W, symmetric: bool) -> std::io::Result<()> {
        let kind = if symmetric { "symmetric" } else { "general" };
        writeln!(w, "%%MatrixMarket matrix coordinate real {kind}")?;
        let mut entries = Vec::new();
        for j in 0..self.ncols {
            for (i, v) in self.column(j) {
                if !symmetric || i >= j {
                    entries.push((i, j, v));
                }
            }
        }
        writeln!(w, "{} {} {}", self.nrows, self.ncols, entries.len())?;
        for (i, j, v) in entries {
            writeln!(w, "{} {} {:.17e}", i + 1, j + 1, v)?;
        }
        Ok(())
    }
}

/// Symmetric sparse matrix with both triangles stored.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix {
    inner: CscMatrix,
}

impl SymMatrix {
    pub fn from_csc(m: CscMatrix) -> Result<Self> {
        if m.nrows != m.ncols {
            return Err(Error::InvalidInput("symmetric matrix must be square".into()));
        }
        for j in 0..m.ncols {
            for (i, v) in m.column(j) {
                let vt = m.get(j, i);
                let scale = v.abs().max(vt.abs()).max(1.0);
                if (v - vt).abs() > 1e-12 * scale || !structurally_present(&m, j, i) {
                    return Err(Error::InvalidInput(format!(
                        "matrix is not symmetric at ({i}, {j}): {v} vs {vt}"
                    )));
                }
            }
        }
        Ok(Self { inner: m })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            inner: CscMatrix::identity(n),
        }
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        Self {
            inner: CscMatrix::from_diagonal(diag),
        }
    }

    /// Builds from a dense symmetric matrix, keeping entries with `|a_ij| > 0`.
    pub fn from_dense(d: &DMatrix<f64>) -> Result<Self> {
        let n = d.nrows();
        let mut t = Triplets::new(n, d.ncols());
        for j in 0..d.ncols() {
            for i in 0..n {
                if d[(i, j)] != 0.0 {
                    t.push(i, j, d[(i, j)]);
                }
            }
        }
        t.to_sym()
    }

    pub fn dim(&self) -> usize {
        self.inner.nrows
    }

    pub fn nnz(&self) -> usize {
        self.inner.nnz()
    }

    pub fn csc(&self) -> &CscMatrix {
        &self.inner
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.inner.values
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.inner.get(i, j)
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.dim()).map(|i| self.get(i, i)).collect()
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        self.inner.mul_vec(x)
    }

    pub fn quad_form(&self, x: &[f64]) -> f64 {
        self.mul_vec(x).iter().zip(x).map(|(a, b)| a * b).sum()
    }

    /// `P A Pᵀ` where row/col `i` of the result is row/col `perm[i]` of `A`.
    pub fn permute(&self, perm: &[usize]) -> SymMatrix {
        let n = self.dim();
        let mut inv = vec![0usize; n];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        let mut t = Triplets::with_capacity(n, n, self.nnz());
        for j in 0..n {
            for (i, v) in self.inner.column(j) {
                t.push(inv[i], inv[j], v);
            }
        }
        SymMatrix {
            inner: t.to_csc(),
        }
    }

    /// `a·A + b·B` over the union pattern.
    pub fn linear_combination(&self, a: f64, other: &SymMatrix, b: f64) -> Result<SymMatrix> {
        if self.dim() != other.dim() {
            return Err(Error::InvalidInput("dimension mismatch in matrix sum".into()));
        }
        let n = self.dim();
        let mut t = Triplets::with_capacity(n, n, self.nnz() + other.nnz());
        for j in 0..n {
            for (i, v) in self.inner.column(j) {
                t.push(i, j, a * v);
            }
            for (i, v) in other.inner.column(j) {
                t.push(i, j, b * v);
            }
        }
        Ok(SymMatrix { inner: t.to_csc() })
    }

    pub fn scale(&self, s: f64) -> SymMatrix {
        let mut out = self.clone();
        for v in out.inner.values.iter_mut() {
            *v *= s;
        }
        out
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        self.inner.to_dense()
    }

    pub fn write_matrix_market<W: Write>(&self, w: W) -> std::io::Result<()> {
        self.inner.write_matrix_market(w, true)
    }
}

fn structurally_present(m: &CscMatrix, i: usize, j: usize) -> bool {
    let range = m.col_ptr[j]..m.col_ptr[j + 1];
    m.row_idx[range].binary_search(&i).is_ok()
}

/// Sparse triple product `Aᵀ diag(w) A` returned as a symmetric matrix.
pub fn weighted_gram(a: &CscMatrix, w: &[f64]) -> SymMatrix {
    assert_eq!(w.len(), a.nrows());
    let rows = a.rows();
    let n = a.ncols();
    let mut t = Triplets::new(n, n);
    for (r, row) in rows.iter().enumerate() {
        for &(j, vj) in row {
            for &(k, vk) in row {
                t.push(j, k, w[r] * vj * vk);
            }
        }
    }
    SymMatrix { inner: t.to_csc() }
}
