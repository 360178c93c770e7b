//! Sparse Cholesky factorization `P A Pᵀ = L Lᵀ` with a fill-reducing ordering.
//!
//! The symbolic phase (ordering, elimination tree, column counts) depends only
//! on the sparsity pattern and is kept separate so that repeated numeric
//! factorizations of matrices with an identical pattern skip it. The numeric
//! phase is a left-looking supernodal algorithm with dense block kernels.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::sync::Arc;

use nalgebra::{DMatrixView, DMatrixViewMut};

use crate::error::{Error, Result};
use crate::sparse::SymMatrix;

fn adjacency(a: &SymMatrix) -> Vec<Vec<usize>> {
    let csc = a.csc();
    (0..a.dim())
        .map(|j| csc.column(j).map(|(i, _)| i).filter(|&i| i != j).collect())
        .collect()
}

/// Greedy minimum-degree ordering on the explicit elimination graph.
///
/// Ties are broken by the smallest index, so the ordering is a pure function
/// of the pattern. Returns `perm` with `perm[k]` = original index eliminated k-th.
pub fn minimum_degree(a: &SymMatrix) -> Vec<usize> {
    let adj = adjacency(a);
    let nodes: Vec<usize> = (0..a.dim()).collect();
    let mut perm = Vec::with_capacity(a.dim());
    local_minimum_degree(&adj, &nodes, &mut perm);
    perm
}

/// Minimum degree on the subgraph induced by `nodes`, appending to `out`.
fn local_minimum_degree(adj: &[Vec<usize>], nodes: &[usize], out: &mut Vec<usize>) {
    let index: HashMap<usize, usize> = nodes.iter().enumerate().map(|(k, &v)| (v, k)).collect();
    let mut local: Vec<HashSet<usize>> = nodes
        .iter()
        .map(|&v| adj[v].iter().filter_map(|u| index.get(u).copied()).collect())
        .collect();
    let mut queue: BTreeSet<(usize, usize)> = (0..nodes.len()).map(|k| (local[k].len(), k)).collect();
    let mut nbrs: Vec<usize> = Vec::new();
    while let Some((_, v)) = queue.pop_first() {
        out.push(nodes[v]);
        nbrs.clear();
        nbrs.extend(local[v].iter().copied());
        nbrs.sort_unstable();
        local[v] = HashSet::new();
        for &u in &nbrs {
            queue.remove(&(local[u].len(), u));
        }
        for &u in &nbrs {
            let set = &mut local[u];
            set.remove(&v);
            set.extend(nbrs.iter().copied().filter(|&w| w != u));
        }
        for &u in &nbrs {
            queue.insert((local[u].len(), u));
        }
    }
}

/// Subgraphs at or below this size are ordered by minimum degree.
const LEAF_SIZE: usize = 200;

/// Nested-dissection ordering with level-set separators.
///
/// Rows much denser than average are removed and ordered last. Each connected
/// part is split at the middle level of a breadth-first search rooted at a
/// pseudo-peripheral node; the separator is ordered after both halves.
pub fn nested_dissection(a: &SymMatrix) -> Vec<usize> {
    let n = a.dim();
    let full = adjacency(a);
    let dense_threshold = 16usize.max((3.0 * (n as f64).sqrt()) as usize);
    let dense: Vec<bool> = full.iter().map(|l| l.len() > dense_threshold).collect();
    let adj: Vec<Vec<usize>> = full
        .iter()
        .map(|l| l.iter().copied().filter(|&u| !dense[u]).collect())
        .collect();
    let mut region = vec![0u32; n];
    for v in 0..n {
        if dense[v] {
            region[v] = u32::MAX;
        }
    }
    let mut perm = Vec::with_capacity(n);
    eliminate_simplicial(&adj, &mut region, &mut perm);
    let mut next_region = 1u32;
    let sparse_nodes: Vec<usize> = (0..n).filter(|&v| region[v] == 0).collect();
    dissect(&adj, &mut region, &mut next_region, sparse_nodes, 0, &mut perm);
    perm.extend((0..n).filter(|&v| dense[v]));
    perm
}

/// Degree bound for the simplicial pre-elimination.
const SIMPLICIAL_DEGREE: usize = 8;

/// Repeatedly orders first every low-degree node whose live neighbours form a
/// clique; eliminating such a node creates no fill.
fn eliminate_simplicial(adj: &[Vec<usize>], region: &mut [u32], out: &mut Vec<usize>) {
    const REMOVED: u32 = u32::MAX - 2;
    let mut queue: Vec<usize> = (0..adj.len()).filter(|&v| region[v] == 0).rev().collect();
    let mut live: Vec<usize> = Vec::new();
    while let Some(v) = queue.pop() {
        if region[v] != 0 {
            continue;
        }
        live.clear();
        live.extend(adj[v].iter().copied().filter(|&u| region[u] == 0));
        if live.len() > SIMPLICIAL_DEGREE {
            continue;
        }
        let clique = live
            .iter()
            .enumerate()
            .all(|(k, &a)| live[k + 1..].iter().all(|b| adj[a].binary_search(b).is_ok()));
        if clique {
            region[v] = REMOVED;
            out.push(v);
            queue.extend(live.iter().copied());
        }
    }
}

fn bfs_levels(adj: &[Vec<usize>], region: &[u32], id: u32, root: usize, level: &mut HashMap<usize, usize>) -> Vec<usize> {
    level.clear();
    level.insert(root, 0);
    let mut order = vec![root];
    let mut head = 0;
    while head < order.len() {
        let v = order[head];
        head += 1;
        let lv = level[&v];
        for &u in &adj[v] {
            if region[u] == id && !level.contains_key(&u) {
                level.insert(u, lv + 1);
                order.push(u);
            }
        }
    }
    order
}

fn dissect(
    adj: &[Vec<usize>],
    region: &mut [u32],
    next_region: &mut u32,
    nodes: Vec<usize>,
    id: u32,
    out: &mut Vec<usize>,
) {
    if nodes.len() <= LEAF_SIZE {
        local_minimum_degree(adj, &nodes, out);
        return;
    }
    let mut level = HashMap::new();
    let mut seen = 0usize;
    let mut visited: HashSet<usize> = HashSet::new();
    for &start in &nodes {
        if visited.contains(&start) {
            continue;
        }
        let first = bfs_levels(adj, region, id, start, &mut level);
        visited.extend(first.iter().copied());
        seen += first.len();
        let far = *first.last().expect("non-empty component");
        let order = bfs_levels(adj, region, id, far, &mut level);
        let depth = level[order.last().expect("non-empty component")];
        if order.len() <= LEAF_SIZE || depth < 2 {
            local_minimum_degree(adj, &order, out);
        } else {
            let mut counts = vec![0usize; depth + 1];
            for v in &order {
                counts[level[v]] += 1;
            }
            let mut cum = 0;
            let mut mid = 1;
            for (l, c) in counts.iter().enumerate() {
                cum += c;
                if 2 * cum >= order.len() {
                    mid = l.clamp(1, depth - 1);
                    break;
                }
            }
            let (low_id, high_id) = (*next_region, *next_region + 1);
            *next_region += 2;
            let mut low = Vec::new();
            let mut high = Vec::new();
            let mut separator = Vec::new();
            for &v in &order {
                let lv = level[&v];
                let is_sep = lv == mid
                    && adj[v].iter().any(|&u| region[u] == id && level.get(&u) == Some(&(mid + 1)));
                if is_sep {
                    separator.push(v);
                } else if lv <= mid {
                    low.push(v);
                } else {
                    high.push(v);
                }
            }
            for &v in &separator {
                region[v] = u32::MAX - 1;
            }
            for &v in &low {
                region[v] = low_id;
            }
            for &v in &high {
                region[v] = high_id;
            }
            dissect(adj, region, next_region, low, low_id, out);
            dissect(adj, region, next_region, high, high_id, out);
            out.extend(separator);
        }
        if seen == nodes.len() {
            break;
        }
    }
}

/// Pattern-only analysis reusable across numeric factorizations.
#[derive(Debug, Clone)]
pub struct Symbolic {
    n: usize,
    perm: Vec<usize>,
    parent: Vec<usize>,
    l_col_ptr: Vec<usize>,
    /// Row indices of `L`, ascending within each column, diagonal first.
    l_row: Vec<usize>,
    /// For each permuted column j: `(row, source index into A.values)` with row ≥ j.
    lower: Vec<Vec<(usize, usize)>>,
    /// Column ranges of the supernodes: consecutive columns sharing one row structure.
    super_ptr: Vec<usize>,
    /// Supernode containing each column.
    super_of: Vec<usize>,
    /// Offsets of the dense column-major supernode blocks.
    block_ptr: Vec<usize>,
    a_nnz: usize,
    a_pattern: Vec<usize>,
}

const NONE: usize = usize::MAX;

/// Updates with at least this many multiply-adds go through a dense `gemm`.
const GEMM_WORK: usize = 4096;

/// Largest dimension for which minimum degree is tried as an alternative ordering.
const MINIMUM_DEGREE_LIMIT: usize = 10_000;

/// Minimum degree is skipped once the dissection factor has this many entries per column.
const MINIMUM_DEGREE_FILL: usize = 40;

impl Symbolic {
    /// Analysis under the cheaper of nested dissection and, for matrices of
    /// moderate size and fill, minimum degree.
    pub fn analyze(a: &SymMatrix) -> Self {
        let dissected = Self::with_ordering(a, nested_dissection(a));
        if a.dim() > MINIMUM_DEGREE_LIMIT || dissected.factor_nnz() > MINIMUM_DEGREE_FILL * a.dim() {
            return dissected;
        }
        let greedy = Self::with_ordering(a, minimum_degree(a));
        if greedy.flops() < dissected.flops() {
            greedy
        } else {
            dissected
        }
    }

    pub fn with_ordering(a: &SymMatrix, perm: Vec<usize>) -> Self {
        let n = a.dim();
        assert_eq!(perm.len(), n);
        let mut inv = vec![0usize; n];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        let csc = a.csc();
        let mut lower: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
        // Strictly upper entries of the permuted matrix, by column.
        let mut upper: Vec<Vec<usize>> = vec![Vec::new(); n];
        for j in 0..n {
            let (start, end) = (csc.col_ptr()[j], csc.col_ptr()[j + 1]);
            for p in start..end {
                let i = csc.row_idx()[p];
                let (pi, pj) = (inv[i], inv[j]);
                if pi >= pj {
                    lower[pj].push((pi, p));
                }
                if pi < pj {
                    upper[pj].push(pi);
                }
            }
        }
        for col in lower.iter_mut() {
            col.sort_unstable();
        }

        // Elimination tree of the permuted matrix.
        let mut parent = vec![NONE; n];
        let mut ancestor = vec![NONE; n];
        for k in 0..n {
            for &i0 in &upper[k] {
                let mut i = i0;
                while i != NONE && i < k {
                    let next = ancestor[i];
                    ancestor[i] = k;
                    if next == NONE {
                        parent[i] = k;
                    }
                    i = next;
                }
            }
        }

        // Row k of L is the reach of row k of A in the elimination tree.
        let mut counts = vec![1usize; n];
        let mut mark = vec![NONE; n];
        let mut reach: Vec<Vec<usize>> = vec![Vec::new(); n];
        for k in 0..n {
            mark[k] = k;
            for &i0 in &upper[k] {
                let mut i = i0;
                while mark[i] != k {
                    counts[i] += 1;
                    mark[i] = k;
                    reach[k].push(i);
                    i = parent[i];
                }
            }
        }
        let mut l_col_ptr = vec![0usize; n + 1];
        for k in 0..n {
            l_col_ptr[k + 1] = l_col_ptr[k] + counts[k];
        }
        let mut l_row = vec![0usize; l_col_ptr[n]];
        let mut next: Vec<usize> = l_col_ptr[..n].to_vec();
        for k in 0..n {
            l_row[next[k]] = k;
            next[k] += 1;
            for &i in &reach[k] {
                l_row[next[i]] = k;
                next[i] += 1;
            }
        }

        // Column j+1 extends the supernode of j when struct(j) = {j} ∪ struct(j+1).
        let mut super_ptr = vec![0usize];
        for j in 1..n {
            if !(parent[j - 1] == j && counts[j - 1] == counts[j] + 1) {
                super_ptr.push(j);
            }
        }
        if n > 0 {
            super_ptr.push(n);
        }
        let n_super = super_ptr.len().saturating_sub(1);
        let mut super_of = vec![0usize; n];
        let mut block_ptr = vec![0usize; n_super + 1];
        for s in 0..n_super {
            let (first, last) = (super_ptr[s], super_ptr[s + 1]);
            super_of[first..last].fill(s);
            block_ptr[s + 1] = block_ptr[s] + counts[first] * (last - first);
        }

        let a_pattern = csc
            .col_ptr()
            .iter()
            .copied()
            .chain(csc.row_idx().iter().copied())
            .collect();
        Self {
            n,
            perm,
            parent,
            l_col_ptr,
            l_row,
            lower,
            super_ptr,
            super_of,
            block_ptr,
            a_nnz: csc.nnz(),
            a_pattern,
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    /// Elimination-tree parent of each permuted column, `usize::MAX` at roots.
    pub fn parent(&self) -> &[usize] {
        &self.parent
    }

    pub fn factor_nnz(&self) -> usize {
        self.l_col_ptr[self.n]
    }

    pub fn n_supernodes(&self) -> usize {
        self.super_ptr.len().saturating_sub(1)
    }

    /// Multiply-add count of the numeric factorization, `Σ_j c_j²` over the
    /// column counts of `L`.
    pub fn flops(&self) -> f64 {
        self.l_col_ptr.windows(2).map(|w| ((w[1] - w[0]) as f64).powi(2)).sum()
    }

    fn rows_of(&self, s: usize) -> &[usize] {
        let first = self.super_ptr[s];
        &self.l_row[self.l_col_ptr[first]..self.l_col_ptr[first + 1]]
    }

    fn matches(&self, a: &SymMatrix) -> bool {
        let csc = a.csc();
        a.dim() == self.n
            && csc.nnz() == self.a_nnz
            && self.a_pattern.len() == self.n + 1 + self.a_nnz
            && self.a_pattern[..self.n + 1] == *csc.col_ptr()
            && self.a_pattern[self.n + 1..] == *csc.row_idx()
    }
}

/// Numeric Cholesky factor of a symmetric positive-definite matrix.
#[derive(Debug, Clone)]
pub struct Cholesky {
    symbolic: Arc<Symbolic>,
    l_val: Vec<f64>,
}

/// `out[c·nr + r] = Σ_k block[(p0+r) + k·m] · block[(p0+c) + k·m]` for `r ≥ c`,
/// the lower trapezoid of the update a supernode contributes to a later one.
fn supernode_update(block: &[f64], m: usize, width: usize, p0: usize, nr: usize, nc: usize, out: &mut Vec<f64>) {
    out.clear();
    out.resize(nr * nc, 0.0);
    if nr * nc * width >= GEMM_WORK {
        let left = DMatrixView::from_slice_with_strides(&block[p0..], nr, width, 1, m);
        let right = DMatrixView::from_slice_with_strides(&block[p0..], nc, width, 1, m).transpose();
        let mut target = DMatrixViewMut::from_slice(out, nr, nc);
        target.gemm(1.0, &left, &right, 0.0);
        return;
    }
    for k in 0..width {
        let col = &block[k * m + p0..k * m + p0 + nr];
        for c in 0..nc {
            let b = col[c];
            if b == 0.0 {
                continue;
            }
            let dst = &mut out[c * nr + c..(c + 1) * nr];
            for (x, y) in dst.iter_mut().zip(&col[c..]) {
                *x += y * b;
            }
        }
    }
}

impl Cholesky {
    pub fn factor(a: &SymMatrix) -> Result<Self> {
        Self::factor_with(Arc::new(Symbolic::analyze(a)), a)
    }

    /// Factorizes `a` using a previous analysis of the same pattern.
    ///
    /// Left-looking supernodal algorithm: each supernode gathers the updates of
    /// all earlier supernodes whose row structure meets its columns, then is
    /// factorized as a dense trapezoid.
    pub fn factor_with(symbolic: Arc<Symbolic>, a: &SymMatrix) -> Result<Self> {
        if !symbolic.matches(a) {
            return Err(Error::InvalidInput(
                "matrix pattern differs from the symbolic analysis".into(),
            ));
        }
        let s = &*symbolic;
        let n = s.n;
        let n_super = s.n_supernodes();
        let values = a.csc().values();
        let mut blocks = vec![0f64; s.block_ptr[n_super]];
        let mut rel = vec![0usize; n];
        // Supernodes with pending updates, linked by the next target they update.
        let mut head = vec![NONE; n_super];
        let mut link = vec![NONE; n_super];
        let mut cursor = vec![0usize; n_super];
        let mut scratch = Vec::new();

        for sn in 0..n_super {
            let (first, last) = (s.super_ptr[sn], s.super_ptr[sn + 1]);
            let width = last - first;
            let rows = s.rows_of(sn);
            let m = rows.len();
            for (r, &row) in rows.iter().enumerate() {
                rel[row] = r;
            }
            let (done, rest) = blocks.split_at_mut(s.block_ptr[sn]);
            let block = &mut rest[..m * width];
            for j in first..last {
                let col = &mut block[(j - first) * m..(j - first + 1) * m];
                for &(i, src) in &s.lower[j] {
                    col[rel[i]] += values[src];
                }
            }

            let mut d = head[sn];
            while d != NONE {
                let next_d = link[d];
                let d_rows = s.rows_of(d);
                let dm = d_rows.len();
                let d_width = s.super_ptr[d + 1] - s.super_ptr[d];
                let p0 = cursor[d];
                let p1 = p0 + d_rows[p0..].partition_point(|&r| r < last);
                let (nr, nc) = (dm - p0, p1 - p0);
                let d_block = &done[s.block_ptr[d]..s.block_ptr[d + 1]];
                supernode_update(d_block, dm, d_width, p0, nr, nc, &mut scratch);
                for c in 0..nc {
                    let col = &mut block[(d_rows[p0 + c] - first) * m..];
                    for r in c..nr {
                        col[rel[d_rows[p0 + r]]] -= scratch[c * nr + r];
                    }
                }
                cursor[d] = p1;
                if p1 < dm {
                    let target = s.super_of[d_rows[p1]];
                    link[d] = head[target];
                    head[target] = d;
                }
                d = next_d;
            }

            for j in 0..width {
                let (left, right) = block.split_at_mut(j * m);
                let col = &mut right[j..m];
                for k in 0..j {
                    let ljk = left[k * m + j];
                    if ljk != 0.0 {
                        for (x, y) in col.iter_mut().zip(&left[k * m + j..(k + 1) * m]) {
                            *x -= ljk * y;
                        }
                    }
                }
                let pivot = col[0];
                if !(pivot > 0.0) || !pivot.is_finite() {
                    return Err(Error::NotPositiveDefinite {
                        column: s.perm[first + j],
                        pivot,
                    });
                }
                let root = pivot.sqrt();
                col[0] = root;
                for x in &mut col[1..] {
                    *x /= root;
                }
            }
            cursor[sn] = width;
            if width < m {
                let target = s.super_of[rows[width]];
                link[sn] = head[target];
                head[target] = sn;
            }
        }

        let mut l_val = vec![0f64; s.factor_nnz()];
        for sn in 0..n_super {
            let (first, last) = (s.super_ptr[sn], s.super_ptr[sn + 1]);
            let m = s.rows_of(sn).len();
            let block = &blocks[s.block_ptr[sn]..s.block_ptr[sn + 1]];
            for j in first..last {
                let c = j - first;
                l_val[s.l_col_ptr[j]..s.l_col_ptr[j + 1]].copy_from_slice(&block[c * m + c..(c + 1) * m]);
            }
        }
        Ok(Self { symbolic, l_val })
    }

    pub fn symbolic(&self) -> &Arc<Symbolic> {
        &self.symbolic
    }

    pub fn dim(&self) -> usize {
        self.symbolic.n
    }

    pub fn log_det(&self) -> f64 {
        let s = &self.symbolic;
        2.0 * (0..s.n).map(|k| self.l_val[s.l_col_ptr[k]].ln()).sum::<f64>()
    }

    /// In place `L y = b` on permuted coordinates.
    fn forward(&self, y: &mut [f64]) {
        let s = &self.symbolic;
        for j in 0..s.n {
            let start = s.l_col_ptr[j];
            let yj = y[j] / self.l_val[start];
            y[j] = yj;
            for p in start + 1..s.l_col_ptr[j + 1] {
                y[s.l_row[p]] -= self.l_val[p] * yj;
            }
        }
    }

    /// In place `Lᵀ x = y` on permuted coordinates.
    fn backward(&self, x: &mut [f64]) {
        let s = &self.symbolic;
        for j in (0..s.n).rev() {
            let start = s.l_col_ptr[j];
            let mut acc = x[j];
            for p in start + 1..s.l_col_ptr[j + 1] {
                acc -= self.l_val[p] * x[s.l_row[p]];
            }
            x[j] = acc / self.l_val[start];
        }
    }

    fn to_permuted(&self, b: &[f64]) -> Vec<f64> {
        self.symbolic.perm.iter().map(|&p| b[p]).collect()
    }

    fn from_permuted(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; y.len()];
        for (i, &p) in self.symbolic.perm.iter().enumerate() {
            out[p] = y[i];
        }
        out
    }

    /// Solves `A x = b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        assert_eq!(b.len(), self.dim());
        let mut y = self.to_permuted(b);
        self.forward(&mut y);
        self.backward(&mut y);
        self.from_permuted(&y)
    }

    /// Maps standard normal `z` to a draw from `N(0, A⁻¹)`: `x = Pᵀ L⁻ᵀ z`.
    pub fn sample_from_normals(&self, z: &[f64]) -> Vec<f64> {
        assert_eq!(z.len(), self.dim());
        let mut y = z.to_vec();
        self.backward(&mut y);
        self.from_permuted(&y)
    }

    /// Squared norm of `L⁻¹ P b`, i.e. `bᵀ A⁻¹ b`.
    pub fn inv_quad_form(&self, b: &[f64]) -> f64 {
        let mut y = self.to_permuted(b);
        self.forward(&mut y);
        y.iter().map(|v| v * v).sum()
    }

    /// `diag(A⁻¹)` restricted to `indices`, by one solve per requested column.
    pub fn inverse_diagonal_at(&self, indices: &[usize]) -> Vec<f64> {
        let n = self.dim();
        let mut e = vec![0.0; n];
        indices
            .iter()
            .map(|&i| {
                e[i] = 1.0;
                let v = self.inv_quad_form(&e);
                e[i] = 0.0;
                v
            })
            .collect()
    }

    /// Column `j` of `A⁻¹`.
    pub fn inverse_column(&self, j: usize) -> Vec<f64> {
        let mut e = vec![0.0; self.dim()];
        e[j] = 1.0;
        self.solve(&e)
    }
}
