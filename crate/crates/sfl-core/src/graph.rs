//! Sparse graph linear algebra.
//!
//! Builds symmetric normalized Laplacians in CSR form, applies the two
//! spectral domain mappings (shift to `[-1, 1]`, scale to `[0, 1]`), and
//! provides the sparse-times-dense-block kernel that every polynomial
//! recurrence step runs on.

use thiserror::Error;

/// Errors from graph construction and sparse kernels.
#[derive(Debug, Error)]
pub enum GraphError {
    #[error("edge ({i}, {j}) out of range for {n} nodes")]
    EdgeOutOfRange { i: usize, j: usize, n: usize },
    #[error("matrix is not structurally symmetric at ({i}, {j})")]
    NotSymmetric { i: usize, j: usize },
    #[error("negative entry {value} at ({i}, {j}); adjacency must be non-negative")]
    NegativeEntry { i: usize, j: usize, value: f64 },
    #[error("shape mismatch: operator is {rows}x{cols}, block has {x_rows} rows")]
    ShapeMismatch {
        rows: usize,
        cols: usize,
        x_rows: usize,
    },
    #[error("invalid CSR structure: {0}")]
    InvalidStructure(String),
}

/// Sparse symmetric operator in compressed-row form.
///
/// Row `i` owns `col_idx[row_ptr[i]..row_ptr[i+1]]` with matching `values`;
/// column indices are strictly increasing within a row. Immutable after
/// construction, safe for concurrent reads.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    n_rows: usize,
    n_cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds a matrix from raw CSR arrays, validating the structure.
    pub fn from_raw(
        n_rows: usize,
        n_cols: usize,
        row_ptr: Vec<usize>,
        col_idx: Vec<usize>,
        values: Vec<f64>,
    ) -> Result<Self, GraphError> {
        let m = Self {
            n_rows,
            n_cols,
            row_ptr,
            col_idx,
            values,
        };
        m.validate()?;
        Ok(m)
    }

    /// Zero matrix with no stored entries.
    pub fn zero(n_rows: usize, n_cols: usize) -> Self {
        Self {
            n_rows,
            n_cols,
            row_ptr: vec![0; n_rows + 1],
            col_idx: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Identity matrix of size `n`.
    pub fn identity(n: usize) -> Self {
        Self {
            n_rows: n,
            n_cols: n,
            row_ptr: (0..=n).collect(),
            col_idx: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    /// Number of stored entries.
    pub fn nnz(&self) -> usize {
        self.col_idx.len()
    }

    pub fn row_ptr(&self) -> &[usize] {
        &self.row_ptr
    }

    pub fn col_idx(&self) -> &[usize] {
        &self.col_idx
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Column indices and values of row `i`.
    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let (lo, hi) = (self.row_ptr[i], self.row_ptr[i + 1]);
        (&self.col_idx[lo..hi], &self.values[lo..hi])
    }

    /// Stored value at `(i, j)`, or 0 if absent.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (cols, vals) = self.row(i);
        match cols.binary_search(&j) {
            Ok(pos) => vals[pos],
            Err(_) => 0.0,
        }
    }

    /// Checks the CSR structural invariants: monotone row pointers, in-range
    /// strictly increasing column indices, finite values.
    pub fn validate(&self) -> Result<(), GraphError> {
        if self.row_ptr.len() != self.n_rows + 1 {
            return Err(GraphError::InvalidStructure(format!(
                "row_ptr has length {}, expected {}",
                self.row_ptr.len(),
                self.n_rows + 1
            )));
        }
        if self.row_ptr[0] != 0 {
            return Err(GraphError::InvalidStructure("row_ptr[0] != 0".into()));
        }
        if *self.row_ptr.last().unwrap() != self.col_idx.len()
            || self.col_idx.len() != self.values.len()
        {
            return Err(GraphError::InvalidStructure(
                "row_ptr end, col_idx and values lengths disagree".into(),
            ));
        }
        for i in 0..self.n_rows {
            if self.row_ptr[i] > self.row_ptr[i + 1] {
                return Err(GraphError::InvalidStructure(format!(
                    "row_ptr decreases at row {i}"
                )));
            }
            let (cols, vals) = self.row(i);
            for (k, &c) in cols.iter().enumerate() {
                if c >= self.n_cols {
                    return Err(GraphError::InvalidStructure(format!(
                        "column {c} out of range in row {i}"
                    )));
                }
                if k > 0 && cols[k - 1] >= c {
                    return Err(GraphError::InvalidStructure(format!(
                        "columns not strictly increasing in row {i}"
                    )));
                }
                if !vals[k].is_finite() {
                    return Err(GraphError::InvalidStructure(format!(
                        "non-finite value at ({i}, {c})"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Checks value symmetry: `(i, j)` present iff `(j, i)` present with an
    /// equal value. Square matrices only.
    pub fn validate_symmetric(&self) -> Result<(), GraphError> {
        if self.n_rows != self.n_cols {
            return Err(GraphError::InvalidStructure(
                "symmetry check requires a square matrix".into(),
            ));
        }
        for i in 0..self.n_rows {
            let (cols, vals) = self.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                if self.get(j, i) != v {
                    return Err(GraphError::NotSymmetric { i, j });
                }
            }
        }
        Ok(())
    }

    /// Densifies to row-major `n_rows * n_cols`; for small oracles and tests.
    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.n_rows * self.n_cols];
        for i in 0..self.n_rows {
            let (cols, vals) = self.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                out[i * self.n_cols + j] = v;
            }
        }
        out
    }
}

/// Which affine map takes the Laplacian spectrum into a basis domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum MappingKind {
    /// `L - I`: spectrum lands in `[-1, 1]` when `lambda_max <= 2`.
    FiniteShift,
    /// `0.5 * L`: spectrum lands in `[0, 1]` when `lambda_max <= 2`.
    SemiInfiniteScale,
}

/// Spectral domain mapping together with the spectral bound it assumes.
///
/// The bound is assumed, not estimated: `lambda_max` of a symmetric
/// normalized Laplacian never exceeds 2, and keeping the map fixed keeps
/// ablations comparable. [`estimate_lambda_max`] exists as a diagnostic.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DomainMapping {
    pub kind: MappingKind,
    pub lambda_max_assumed: f64,
}

impl DomainMapping {
    pub fn finite_shift() -> Self {
        Self {
            kind: MappingKind::FiniteShift,
            lambda_max_assumed: 2.0,
        }
    }

    pub fn semi_infinite_scale() -> Self {
        Self {
            kind: MappingKind::SemiInfiniteScale,
            lambda_max_assumed: 2.0,
        }
    }

    /// The scalar map applied to an eigenvalue.
    pub fn map_eigenvalue(&self, lambda: f64) -> f64 {
        match self.kind {
            MappingKind::FiniteShift => lambda - 1.0,
            MappingKind::SemiInfiniteScale => 0.5 * lambda,
        }
    }
}

/// Builds a symmetrized, deduplicated, unit-weight adjacency matrix from an
/// edge list. Input may contain duplicates and both orientations; diagonal
/// pairs in the input are dropped, and `add_self_loops` adds a unit loop to
/// every node.
pub fn csr_from_edge_list(
    edges: &[(usize, usize)],
    n: usize,
    add_self_loops: bool,
) -> Result<CsrMatrix, GraphError> {
    let mut pairs: Vec<(usize, usize)> = Vec::with_capacity(edges.len() * 2 + n);
    for &(i, j) in edges {
        if i >= n || j >= n {
            return Err(GraphError::EdgeOutOfRange { i, j, n });
        }
        if i == j {
            continue;
        }
        pairs.push((i, j));
        pairs.push((j, i));
    }
    if add_self_loops {
        for i in 0..n {
            pairs.push((i, i));
        }
    }
    pairs.sort_unstable();
    pairs.dedup();

    let mut row_ptr = vec![0usize; n + 1];
    for &(i, _) in &pairs {
        row_ptr[i + 1] += 1;
    }
    for i in 0..n {
        row_ptr[i + 1] += row_ptr[i];
    }
    let col_idx: Vec<usize> = pairs.iter().map(|&(_, j)| j).collect();
    let values = vec![1.0; col_idx.len()];
    Ok(CsrMatrix {
        n_rows: n,
        n_cols: n,
        row_ptr,
        col_idx,
        values,
    })
}

/// Symmetric normalized Laplacian `I - D^{-1/2} A D^{-1/2}`.
///
/// Isolated nodes (degree 0) get a bare diagonal 1 and no off-diagonals, so
/// the spectrum stays in `[0, 2]` and no entry turns NaN. Rejects
/// asymmetric or negative input.
pub fn sym_normalized_laplacian(a: &CsrMatrix) -> Result<CsrMatrix, GraphError> {
    a.validate_symmetric()?;
    let n = a.n_rows();
    for i in 0..n {
        let (cols, vals) = a.row(i);
        for (&j, &v) in cols.iter().zip(vals) {
            if v < 0.0 {
                return Err(GraphError::NegativeEntry { i, j, value: v });
            }
        }
    }

    let mut degree = vec![0.0f64; n];
    for (i, d) in degree.iter_mut().enumerate() {
        let (_, vals) = a.row(i);
        *d = vals.iter().sum();
    }

    let mut row_ptr = Vec::with_capacity(n + 1);
    let mut col_idx = Vec::with_capacity(a.nnz() + n);
    let mut values = Vec::with_capacity(a.nnz() + n);
    row_ptr.push(0);
    for i in 0..n {
        let (cols, vals) = a.row(i);
        let mut wrote_diag = false;
        for (&j, &v) in cols.iter().zip(vals) {
            // 1/sqrt(d_i d_j) in one shot keeps exactly representable
            // normalizations exact (e.g. the triangle's -1/2).
            let dd = degree[i] * degree[j];
            let norm = if dd > 0.0 { v / dd.sqrt() } else { 0.0 };
            if j == i {
                col_idx.push(i);
                values.push(1.0 - norm);
                wrote_diag = true;
            } else {
                if !wrote_diag && j > i {
                    col_idx.push(i);
                    values.push(1.0);
                    wrote_diag = true;
                }
                col_idx.push(j);
                values.push(-norm);
            }
        }
        if !wrote_diag {
            col_idx.push(i);
            values.push(1.0);
        }
        row_ptr.push(col_idx.len());
    }
    Ok(CsrMatrix {
        n_rows: n,
        n_cols: n,
        row_ptr,
        col_idx,
        values,
    })
}

/// Applies a spectral domain mapping to a Laplacian.
///
/// `FiniteShift` subtracts 1 from every diagonal entry (inserting an
/// explicit diagonal where the input stores none); `SemiInfiniteScale`
/// halves every stored value. Both are exactly invertible on the values.
pub fn apply_domain_mapping(l: &CsrMatrix, m: &DomainMapping) -> CsrMatrix {
    match m.kind {
        MappingKind::SemiInfiniteScale => {
            let mut out = l.clone();
            for v in &mut out.values {
                *v *= 0.5;
            }
            out
        }
        MappingKind::FiniteShift => {
            let n = l.n_rows();
            let mut row_ptr = Vec::with_capacity(n + 1);
            let mut col_idx = Vec::with_capacity(l.nnz() + n);
            let mut values = Vec::with_capacity(l.nnz() + n);
            row_ptr.push(0);
            for i in 0..n {
                let (cols, vals) = l.row(i);
                let mut wrote_diag = false;
                for (&j, &v) in cols.iter().zip(vals) {
                    if j == i {
                        col_idx.push(i);
                        values.push(v - 1.0);
                        wrote_diag = true;
                    } else {
                        if !wrote_diag && j > i {
                            col_idx.push(i);
                            values.push(-1.0);
                            wrote_diag = true;
                        }
                        col_idx.push(j);
                        values.push(v);
                    }
                }
                if !wrote_diag {
                    col_idx.push(i);
                    values.push(-1.0);
                }
                row_ptr.push(col_idx.len());
            }
            CsrMatrix {
                n_rows: n,
                n_cols: n,
                row_ptr,
                col_idx,
                values,
            }
        }
    }
}

/// Adds the identity back onto a matrix (undoes `FiniteShift` bitwise).
pub fn add_identity(l: &CsrMatrix) -> CsrMatrix {
    let mut out = l.clone();
    for i in 0..out.n_rows {
        let (lo, hi) = (out.row_ptr[i], out.row_ptr[i + 1]);
        match out.col_idx[lo..hi].binary_search(&i) {
            Ok(pos) => out.values[lo + pos] += 1.0,
            Err(_) => panic!("add_identity expects an explicit diagonal"),
        }
    }
    out
}

/// Sparse-times-dense kernel: writes `A * X` into `out`.
///
/// `x` and `out` are row-major with `f` columns. Accumulation order within a
/// row is fixed (column order), so the result is deterministic.
pub fn spmm_into(a: &CsrMatrix, x: &[f64], f: usize, out: &mut [f64]) {
    debug_assert_eq!(x.len(), a.n_cols() * f);
    debug_assert_eq!(out.len(), a.n_rows() * f);
    for i in 0..a.n_rows() {
        let (cols, vals) = a.row(i);
        let row_out = &mut out[i * f..(i + 1) * f];
        row_out.fill(0.0);
        for (&j, &v) in cols.iter().zip(vals) {
            let row_x = &x[j * f..(j + 1) * f];
            for (o, &xv) in row_out.iter_mut().zip(row_x) {
                *o += v * xv;
            }
        }
    }
}

/// Sparse-times-dense product `A * X` where `X` is `n_cols x f` row-major.
pub fn spmm(a: &CsrMatrix, x: &[f64], f: usize) -> Result<Vec<f64>, GraphError> {
    if x.len() != a.n_cols() * f {
        return Err(GraphError::ShapeMismatch {
            rows: a.n_rows(),
            cols: a.n_cols(),
            x_rows: if f == 0 { 0 } else { x.len() / f },
        });
    }
    let mut out = vec![0.0; a.n_rows() * f];
    spmm_into(a, x, f, &mut out);
    Ok(out)
}

/// Power-iteration estimate of the largest eigenvalue.
#[derive(Debug, Clone, Copy)]
pub struct LambdaMaxEstimate {
    pub value: f64,
    pub converged: bool,
    pub iterations: usize,
    /// The bound the domain mappings assume regardless of the estimate.
    pub assumed: f64,
}

/// Estimates the largest eigenvalue of a symmetric operator by power
/// iteration. Diagnostic only: domain mappings keep assuming
/// `lambda_max = 2`. On non-convergence the best estimate is returned with
/// `converged = false`.
///
/// Note the empty graph: its Laplacian is the identity under the
/// isolated-node convention, so the estimate is 1, not 0.
pub fn estimate_lambda_max(l: &CsrMatrix, iters: usize, tol: f64) -> LambdaMaxEstimate {
    let n = l.n_rows();
    if n == 0 {
        return LambdaMaxEstimate {
            value: 0.0,
            converged: true,
            iterations: 0,
            assumed: 2.0,
        };
    }
    // Deterministic pseudo-random start, no RNG dependency.
    let mut v: Vec<f64> = (0..n)
        .map(|i| {
            let mut z = (i as u64).wrapping_add(0x9e3779b97f4a7c15);
            z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
            ((z >> 11) as f64) / ((1u64 << 53) as f64) - 0.5
        })
        .collect();
    normalize(&mut v);

    let mut lambda = 0.0f64;
    let mut work = vec![0.0; n];
    for it in 1..=iters {
        spmm_into(l, &v, 1, &mut work);
        let new_lambda: f64 = v.iter().zip(&work).map(|(a, b)| a * b).sum();
        let norm = work.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            // Operator annihilates the iterate: largest eigenvalue is 0.
            return LambdaMaxEstimate {
                value: 0.0,
                converged: true,
                iterations: it,
                assumed: 2.0,
            };
        }
        for (vi, wi) in v.iter_mut().zip(&work) {
            *vi = wi / norm;
        }
        if (new_lambda - lambda).abs() <= tol * new_lambda.abs().max(1.0) {
            return LambdaMaxEstimate {
                value: new_lambda,
                converged: true,
                iterations: it,
                assumed: 2.0,
            };
        }
        lambda = new_lambda;
    }
    LambdaMaxEstimate {
        value: lambda,
        converged: false,
        iterations: iters,
        assumed: 2.0,
    }
}

fn normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in v {
            *x /= norm;
        }
    }
}
