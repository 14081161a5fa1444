//! Sparse and dense linear algebra used by the assembly and the reduced solver.
//!
//! Matrices are stored in compressed row form. Direct factorizations are
//! delegated to `faer` (supernodal Cholesky for SPD blocks, sparse LU with
//! partial pivoting for the bordered 1D saddle blocks). Small SPD blocks use
//! AMD; large ones use the level-set nested dissection ordering below.

use std::fmt::Write as _;
use std::io::{self, Write};

use faer::dyn_stack::{MemBuffer, MemStack};
use faer::linalg::solvers::Solve;
use faer::perm::PermRef;
use faer::sparse::linalg::cholesky::{
    factorize_symbolic_cholesky, LltRef, SymbolicCholesky, SymmetricOrdering,
};
use faer::sparse::{SparseColMat, Triplet};
use faer::{Conj, Mat, Par, Side};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix is not positive definite (non-positive pivot at {index})")]
    NotPositiveDefinite { index: usize },
    #[error("matrix is singular")]
    Singular,
    #[error("factorization failed: {0}")]
    Backend(String),
}

/// Sparse matrix in compressed row storage.
///
/// Column indices are sorted and unique within each row and no stored value
/// is exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    nrows: usize,
    ncols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

/// Accumulates `(row, col, value)` contributions; duplicates are summed.
#[derive(Debug, Clone)]
pub struct TripletBuilder {
    nrows: usize,
    ncols: usize,
    entries: Vec<(usize, usize, f64)>,
}

impl TripletBuilder {
    pub fn new(nrows: usize, ncols: usize) -> Self {
        Self { nrows, ncols, entries: Vec::new() }
    }

    pub fn with_capacity(nrows: usize, ncols: usize, cap: usize) -> Self {
        Self { nrows, ncols, entries: Vec::with_capacity(cap) }
    }

    #[inline]
    pub fn push(&mut self, row: usize, col: usize, value: f64) {
        debug_assert!(row < self.nrows && col < self.ncols);
        self.entries.push((row, col, value));
    }

    pub fn build(self) -> SparseMatrix {
        SparseMatrix::from_triplets(self.nrows, self.ncols, self.entries)
    }
}

impl SparseMatrix {
    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        Self {
            nrows,
            ncols,
            row_ptr: vec![0; nrows + 1],
            col_idx: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_triplets(n, n, (0..n).map(|i| (i, i, 1.0)).collect())
    }

    /// Builds a matrix from unordered triplets. Entries at the same position
    /// are summed in input order, so the result is deterministic.
    pub fn from_triplets(nrows: usize, ncols: usize, mut entries: Vec<(usize, usize, f64)>) -> Self {
        // stable sort keeps the summation order of duplicates reproducible
        entries.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut row_ptr = vec![0usize; nrows + 1];
        let mut col_idx = Vec::with_capacity(entries.len());
        let mut values = Vec::with_capacity(entries.len());
        let mut iter = entries.into_iter().peekable();
        while let Some((r, c, mut v)) = iter.next() {
            assert!(r < nrows && c < ncols, "triplet ({r},{c}) out of bounds {nrows}x{ncols}");
            while let Some(&(r2, c2, v2)) = iter.peek() {
                if r2 == r && c2 == c {
                    v += v2;
                    iter.next();
                } else {
                    break;
                }
            }
            if v != 0.0 {
                col_idx.push(c);
                values.push(v);
                row_ptr[r + 1] += 1;
            }
        }
        for i in 0..nrows {
            row_ptr[i + 1] += row_ptr[i];
        }
        Self { nrows, ncols, row_ptr, col_idx, values }
    }

    /// Matrix with a fixed sparsity pattern and zero values, to be filled
    /// with [`SparseMatrix::add_to`]. Call [`SparseMatrix::finalize`] once done.
    pub fn from_pattern(nrows: usize, ncols: usize, mut rows: Vec<Vec<usize>>) -> Self {
        assert_eq!(rows.len(), nrows);
        let mut row_ptr = Vec::with_capacity(nrows + 1);
        row_ptr.push(0);
        let mut col_idx = Vec::new();
        for r in rows.iter_mut() {
            r.sort_unstable();
            r.dedup();
            col_idx.extend_from_slice(r);
            row_ptr.push(col_idx.len());
        }
        let values = vec![0.0; col_idx.len()];
        Self { nrows, ncols, row_ptr, col_idx, values }
    }

    /// Adds `v` at `(i, j)`, which must belong to the pattern.
    #[inline]
    pub fn add_to(&mut self, i: usize, j: usize, v: f64) {
        let (a, b) = (self.row_ptr[i], self.row_ptr[i + 1]);
        let p = self.col_idx[a..b].binary_search(&j).unwrap_or_else(|_| panic!("({i},{j}) not in pattern"));
        self.values[a + p] += v;
    }

    /// Drops stored zeros.
    pub fn finalize(mut self) -> Self {
        self.prune();
        self
    }

    pub fn from_dense(rows: &[Vec<f64>]) -> Self {
        let nrows = rows.len();
        let ncols = rows.first().map_or(0, |r| r.len());
        let mut t = Vec::new();
        for (i, row) in rows.iter().enumerate() {
            assert_eq!(row.len(), ncols);
            for (j, &v) in row.iter().enumerate() {
                t.push((i, j, v));
            }
        }
        Self::from_triplets(nrows, ncols, t)
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

    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let (a, b) = (self.row_ptr[i], self.row_ptr[i + 1]);
        (&self.col_idx[a..b], &self.values[a..b])
    }

    /// Iterates over stored entries as `(row, col, value)` in row-major order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.nrows).flat_map(move |i| {
            let (cols, vals) = self.row(i);
            cols.iter().zip(vals).map(move |(&j, &v)| (i, j, v))
        })
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (cols, vals) = self.row(i);
        match cols.binary_search(&j) {
            Ok(p) => vals[p],
            Err(_) => 0.0,
        }
    }

    pub fn transpose(&self) -> Self {
        Self::from_triplets(self.ncols, self.nrows, self.iter().map(|(i, j, v)| (j, i, v)).collect())
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.ncols]; self.nrows];
        for (i, j, v) in self.iter() {
            d[i][j] = v;
        }
        d
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Entry-wise symmetry test relative to the largest entry.
    pub fn is_symmetric(&self, rel_tol: f64) -> bool {
        if self.nrows != self.ncols {
            return false;
        }
        let scale = self.max_abs().max(f64::MIN_POSITIVE);
        self.iter().all(|(i, j, v)| (v - self.get(j, i)).abs() <= rel_tol * scale)
    }

    /// Keeps the listed rows and columns (in the given order).
    pub fn submatrix(&self, rows: &[usize], cols: &[usize]) -> Self {
        let mut col_map = vec![usize::MAX; self.ncols];
        for (new, &old) in cols.iter().enumerate() {
            col_map[old] = new;
        }
        let mut t = Vec::new();
        for (new_i, &old_i) in rows.iter().enumerate() {
            let (cs, vs) = self.row(old_i);
            for (&c, &v) in cs.iter().zip(vs) {
                let nc = col_map[c];
                if nc != usize::MAX {
                    t.push((new_i, nc, v));
                }
            }
        }
        Self::from_triplets(rows.len(), cols.len(), t)
    }

    pub fn scaled(&self, factor: f64) -> Self {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v *= factor);
        out.prune();
        out
    }

    fn prune(&mut self) {
        if self.values.iter().all(|&v| v != 0.0) {
            return;
        }
        *self = Self::from_triplets(self.nrows, self.ncols, self.iter().collect());
    }

    /// `y = self * x` (or `selfᵀ * x`).
    pub fn spmv(&self, x: &[f64], transpose: bool) -> Result<Vec<f64>, LinalgError> {
        let (inn, out) = if transpose { (self.nrows, self.ncols) } else { (self.ncols, self.nrows) };
        if x.len() != inn {
            return Err(LinalgError::DimensionMismatch { expected: inn, got: x.len() });
        }
        let mut y = vec![0.0; out];
        if transpose {
            self.mul_transpose_add(x, &mut y);
        } else {
            self.mul_add(x, &mut y);
        }
        Ok(y)
    }

    /// `y += self * x` without dimension checks beyond debug assertions.
    pub fn mul_add(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.ncols);
        debug_assert_eq!(y.len(), self.nrows);
        for (i, yi) in y.iter_mut().enumerate() {
            let (cols, vals) = self.row(i);
            *yi += cols.iter().zip(vals).map(|(&j, &v)| v * x[j]).sum::<f64>();
        }
    }

    /// `y += selfᵀ * x`.
    pub fn mul_transpose_add(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.nrows);
        debug_assert_eq!(y.len(), self.ncols);
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let (cols, vals) = self.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                y[j] += v * xi;
            }
        }
    }

    /// `xᵀ self y`.
    pub fn quad_form(&self, x: &[f64], y: &[f64]) -> f64 {
        let mut s = 0.0;
        for (i, &xi) in x.iter().enumerate() {
            let (cols, vals) = self.row(i);
            s += xi * cols.iter().zip(vals).map(|(&j, &v)| v * y[j]).sum::<f64>();
        }
        s
    }

    fn to_faer(&self) -> Result<SparseColMat<usize, f64>, LinalgError> {
        let triplets: Vec<_> = self.iter().map(|(i, j, v)| Triplet::new(i, j, v)).collect();
        SparseColMat::try_new_from_triplets(self.nrows, self.ncols, &triplets)
            .map_err(|e| LinalgError::Backend(format!("{e:?}")))
    }

    /// Writes the matrix in MatrixMarket coordinate format (1-based indices).
    pub fn write_matrix_market<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "%%MatrixMarket matrix coordinate real general")?;
        writeln!(w, "{} {} {}", self.nrows, self.ncols, self.nnz())?;
        for (i, j, v) in self.iter() {
            writeln!(w, "{} {} {:e}", i + 1, j + 1, v)?;
        }
        Ok(())
    }

    pub fn to_matrix_market_string(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "%%MatrixMarket matrix coordinate real general");
        let _ = writeln!(s, "{} {} {}", self.nrows, self.ncols, self.nnz());
        for (i, j, v) in self.iter() {
            let _ = writeln!(s, "{} {} {:e}", i + 1, j + 1, v);
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FactorKind {
    SymmetricPositiveDefinite,
    SymmetricIndefinite,
}

/// SPD blocks with at least this many rows are ordered by nested dissection.
pub const NESTED_DISSECTION_MIN: usize = 20_000;

enum Backend {
    Llt(faer::sparse::linalg::solvers::Llt<usize, f64>),
    Custom { symbolic: SymbolicCholesky<usize>, values: Vec<f64> },
    Lu(faer::sparse::linalg::solvers::Lu<usize, f64>),
    Empty,
}

/// Reusable direct factorization of a square sparse matrix.
pub struct Factorization {
    kind: FactorKind,
    n: usize,
    backend: Backend,
}

impl std::fmt::Debug for Factorization {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Factorization").field("kind", &self.kind).field("n", &self.n).finish()
    }
}

/// Fill-reducing ordering for the SPD path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SpdOrdering {
    /// AMD below [`NESTED_DISSECTION_MIN`] rows, nested dissection above.
    #[default]
    Auto,
    Amd,
    NestedDissection,
}

/// Factorizes `m`. The SPD path doubles as a positive-definiteness test: a
/// non-positive pivot is reported as [`LinalgError::NotPositiveDefinite`].
pub fn factorize(m: &SparseMatrix, kind: FactorKind) -> Result<Factorization, LinalgError> {
    factorize_with(m, kind, SpdOrdering::Auto)
}

pub fn factorize_with(m: &SparseMatrix, kind: FactorKind, ordering: SpdOrdering) -> Result<Factorization, LinalgError> {
    if m.nrows != m.ncols {
        return Err(LinalgError::NotSquare { rows: m.nrows, cols: m.ncols });
    }
    let n = m.nrows;
    if n == 0 {
        return Ok(Factorization { kind, n, backend: Backend::Empty });
    }
    for i in 0..n {
        if m.row(i).0.is_empty() {
            return Err(LinalgError::Singular);
        }
    }
    let mat = m.to_faer()?;
    let backend = match kind {
        FactorKind::SymmetricPositiveDefinite
            if ordering == SpdOrdering::NestedDissection
                || (ordering == SpdOrdering::Auto && n >= NESTED_DISSECTION_MIN) =>
        {
            let perm = nested_dissection(m, 64);
            cholesky_with_ordering(&mat, &perm)?
        }
        FactorKind::SymmetricPositiveDefinite => {
            let llt = mat.sp_cholesky(Side::Lower).map_err(map_llt_error)?;
            Backend::Llt(llt)
        }
        FactorKind::SymmetricIndefinite => {
            let lu = mat.sp_lu().map_err(|e| match e {
                faer::sparse::linalg::LuError::SymbolicSingular { .. } => LinalgError::Singular,
                other => LinalgError::Backend(format!("{other:?}")),
            })?;
            Backend::Lu(lu)
        }
    };
    let f = Factorization { kind, n, backend };
    // sparse LU does not flag numerically zero pivots
    if kind == FactorKind::SymmetricIndefinite {
        let probe: Vec<f64> = (0..n).map(|i| 1.0 + (i % 7) as f64 * 0.125).collect();
        let x = f.solve(&probe)?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(LinalgError::Singular);
        }
    }
    Ok(f)
}

impl Factorization {
    pub fn kind(&self) -> FactorKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>, LinalgError> {
        self.solve_impl(b, false)
    }

    pub fn solve_transpose(&self, b: &[f64]) -> Result<Vec<f64>, LinalgError> {
        self.solve_impl(b, true)
    }

    fn solve_impl(&self, b: &[f64], transpose: bool) -> Result<Vec<f64>, LinalgError> {
        if b.len() != self.n {
            return Err(LinalgError::DimensionMismatch { expected: self.n, got: b.len() });
        }
        let mut rhs = Mat::<f64>::from_fn(self.n, 1, |i, _| b[i]);
        match &self.backend {
            Backend::Empty => {}
            Backend::Llt(f) => f.solve_in_place(rhs.as_mut()),
            Backend::Custom { symbolic, values } => {
                let mut mem = MemBuffer::new(symbolic.solve_in_place_scratch::<f64>(1, Par::Seq));
                LltRef::new(symbolic, values).solve_in_place_with_conj(
                    Conj::No,
                    rhs.as_mut(),
                    Par::Seq,
                    MemStack::new(&mut mem),
                );
            }
            Backend::Lu(f) if transpose => f.solve_transpose_in_place(rhs.as_mut()),
            Backend::Lu(f) => f.solve_in_place(rhs.as_mut()),
        }
        Ok((0..self.n).map(|i| rhs[(i, 0)]).collect())
    }
}

fn map_llt_error(e: faer::sparse::linalg::LltError) -> LinalgError {
    match e {
        faer::sparse::linalg::LltError::Numeric(
            faer::linalg::cholesky::llt::factor::LltError::NonPositivePivot { index },
        ) => LinalgError::NotPositiveDefinite { index },
        other => LinalgError::Backend(format!("{other:?}")),
    }
}

fn cholesky_with_ordering(mat: &SparseColMat<usize, f64>, perm: &[usize]) -> Result<Backend, LinalgError> {
    let n = perm.len();
    let mut inv = vec![0; n];
    for (new, &old) in perm.iter().enumerate() {
        inv[old] = new;
    }
    let ordering = SymmetricOrdering::Custom(PermRef::new_checked(perm, &inv, n));
    let symbolic = factorize_symbolic_cholesky(mat.symbolic(), Side::Lower, ordering, Default::default())
        .map_err(|e| LinalgError::Backend(format!("{e:?}")))?;
    let mut values = vec![0.0; symbolic.len_val()];
    let mut mem = MemBuffer::new(symbolic.factorize_numeric_llt_scratch::<f64>(Par::Seq, Default::default()));
    symbolic
        .factorize_numeric_llt(
            &mut values,
            mat.as_ref(),
            Side::Lower,
            Default::default(),
            Par::Seq,
            MemStack::new(&mut mem),
            Default::default(),
        )
        .map_err(|e| match e {
            faer::linalg::solvers::LltError::NonPositivePivot { index } => LinalgError::NotPositiveDefinite { index },
        })?;
    Ok(Backend::Custom { symbolic, values })
}

/// Fill-reducing ordering by recursive level-set bisection of the adjacency
/// graph of `m` (whose pattern is taken as symmetric). Returns `perm` with
/// `perm[new] = old`. Parts of at most `leaf` vertices are kept in place.
pub fn nested_dissection(m: &SparseMatrix, leaf: usize) -> Vec<usize> {
    const SEPARATOR: u32 = u32::MAX;
    let n = m.nrows.min(m.ncols);
    let leaf = leaf.max(1);
    let mut label = vec![0u32; n];
    let mut next_label = 1u32;
    let mut stamp = vec![0u32; n];
    let mut level = vec![0u32; n];
    let mut visit = 0u32;
    let mut perm = Vec::with_capacity(n);

    enum Task {
        Split(Vec<usize>),
        Emit(Vec<usize>),
    }
    let mut stack = vec![Task::Split((0..n).collect())];

    while let Some(task) = stack.pop() {
        let nodes = match task {
            Task::Emit(nodes) => {
                perm.extend(nodes);
                continue;
            }
            Task::Split(nodes) => nodes,
        };
        if nodes.len() <= leaf {
            perm.extend(nodes);
            continue;
        }
        let lab = label[nodes[0]];
        let mut order = level_sets(m, nodes[0], lab, &label, &mut visit, &mut stamp, &mut level);
        if order.len() < nodes.len() {
            let reached = visit;
            let rest: Vec<usize> = nodes.iter().copied().filter(|&v| stamp[v] != reached).collect();
            for &v in &rest {
                label[v] = next_label;
            }
            next_label += 1;
            stack.push(Task::Split(rest));
            stack.push(Task::Split(order));
            continue;
        }
        for _ in 0..2 {
            let far = *order.last().expect("non-empty part");
            let depth = level[far];
            let candidate = level_sets(m, far, lab, &label, &mut visit, &mut stamp, &mut level);
            let new_depth = level[*candidate.last().expect("non-empty part")];
            order = candidate;
            if new_depth <= depth {
                break;
            }
        }
        let depth = level[*order.last().expect("non-empty part")] as usize;
        if depth < 2 {
            perm.extend(nodes);
            continue;
        }
        let mut counts = vec![0usize; depth + 1];
        for &v in &order {
            counts[level[v] as usize] += 1;
        }
        // smallest level whose removal leaves both sides with 30-70% of the rest
        let total = nodes.len();
        let mut below = 0;
        let mut best: Option<(usize, usize)> = None;
        let mut median = 1;
        for (l, &c) in counts.iter().enumerate() {
            if l >= 1 && l < depth {
                let above = total - below - c;
                let small = below.min(above);
                if 10 * small >= 3 * (total - c) && best.is_none_or(|(_, bc)| c < bc) {
                    best = Some((l, c));
                }
                if below < total / 2 {
                    median = l;
                }
            }
            below += c;
        }
        let sep_level = best.map_or(median, |(l, _)| l) as u32;
        let (mut a, mut b, mut sep) = (Vec::new(), Vec::new(), Vec::new());
        for &v in &order {
            match level[v].cmp(&sep_level) {
                std::cmp::Ordering::Less => a.push(v),
                std::cmp::Ordering::Equal => sep.push(v),
                std::cmp::Ordering::Greater => b.push(v),
            }
        }
        for &v in &a {
            label[v] = next_label;
        }
        for &v in &b {
            label[v] = next_label + 1;
        }
        for &v in &sep {
            label[v] = SEPARATOR;
        }
        next_label += 2;
        stack.push(Task::Emit(sep));
        stack.push(Task::Split(b));
        stack.push(Task::Split(a));
    }
    perm
}

/// Breadth-first sweep over the vertices labelled `lab`; returns them in visit
/// order with `level` holding their distance from `start`.
fn level_sets(
    m: &SparseMatrix,
    start: usize,
    lab: u32,
    label: &[u32],
    visit: &mut u32,
    stamp: &mut [u32],
    level: &mut [u32],
) -> Vec<usize> {
    *visit += 1;
    let mut order = vec![start];
    stamp[start] = *visit;
    level[start] = 0;
    let mut head = 0;
    while head < order.len() {
        let v = order[head];
        head += 1;
        for &w in m.row(v).0 {
            if w < label.len() && label[w] == lab && stamp[w] != *visit {
                stamp[w] = *visit;
                level[w] = level[v] + 1;
                order.push(w);
            }
        }
    }
    order
}

/// Dense LU solve with partial pivoting; reports singularity when a pivot is
/// negligible relative to the largest entry.
pub fn dense_solve(m: &[Vec<f64>], b: &[f64]) -> Result<Vec<f64>, LinalgError> {
    let n = m.len();
    if let Some(r) = m.iter().find(|r| r.len() != n) {
        return Err(LinalgError::NotSquare { rows: n, cols: r.len() });
    }
    if b.len() != n {
        return Err(LinalgError::DimensionMismatch { expected: n, got: b.len() });
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let a = Mat::<f64>::from_fn(n, n, |i, j| m[i][j]);
    let scale = m.iter().flatten().fold(0.0f64, |s, v| s.max(v.abs()));
    if scale == 0.0 {
        return Err(LinalgError::Singular);
    }
    let lu = a.partial_piv_lu();
    let u = lu.U();
    for i in 0..n {
        if u[(i, i)].abs() <= f64::EPSILON * scale * n as f64 {
            return Err(LinalgError::Singular);
        }
    }
    let rhs = Mat::<f64>::from_fn(n, 1, |i, _| b[i]);
    let x = lu.solve(rhs);
    Ok((0..n).map(|i| x[(i, 0)]).collect())
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += alpha * x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    y.iter_mut().zip(x).for_each(|(yi, xi)| *yi += alpha * xi);
}
