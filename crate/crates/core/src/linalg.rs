//! Dense `f64` matrix numerics.
//!
//! Everything the rest of the crate needs from linear algebra lives here:
//! row softmax, Householder QR with column pivoting (rank estimation and
//! kernel bases), one-sided Jacobi singular values and the Eckart–Young
//! residual. Matrices are small enough at desk scale that plain row-major
//! storage and straightforward loops are sufficient; every reduction runs in
//! a fixed order so results are bit-reproducible.

use std::fmt;

use thiserror::Error;

/// Rank threshold on `|R_ii|` used throughout the crate.
pub const DEFAULT_RANK_TOL: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    DimensionMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("matrix dimensions must be positive, got {rows}x{cols}")]
    EmptyShape { rows: usize, cols: usize },
    #[error("expected {expected} entries for the given shape, got {got}")]
    EntryCount { expected: usize, got: usize },
    #[error("non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("jacobi SVD did not converge within {sweeps} sweeps")]
    SvdNoConvergence { sweeps: usize },
}

/// Row-major dense matrix of finite `f64` values.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows.min(8) {
            writeln!(f, "  {:?}", &self.row(i)[..self.cols.min(8)])?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    /// Checked constructor: positive shape, matching entry count, finite values.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, LinalgError> {
        if rows == 0 || cols == 0 {
            return Err(LinalgError::EmptyShape { rows, cols });
        }
        if data.len() != rows * cols {
            return Err(LinalgError::EntryCount {
                expected: rows * cols,
                got: data.len(),
            });
        }
        if let Some(k) = data.iter().position(|x| !x.is_finite()) {
            return Err(LinalgError::NonFinite {
                row: k / cols,
                col: k % cols,
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        Self::from_raw(rows, cols, vec![0.0; rows * cols])
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m.data[i * cols + j] = f(i, j);
            }
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, LinalgError> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(LinalgError::EntryCount {
                    expected: c,
                    got: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Self::new(r, c, data)
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut m = Self::zeros(n, n);
        for (i, &v) in values.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
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
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    /// `self · other`
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix, LinalgError> {
        if self.cols != other.rows {
            return Err(self.mismatch("matmul", other));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                axpy(a, other.row(k), out_row);
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ`
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix, LinalgError> {
        if self.cols != other.cols {
            return Err(self.mismatch("matmul_t", other));
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            let out_row = &mut out.data[i * other.rows..(i + 1) * other.rows];
            for (j, o) in out_row.iter_mut().enumerate() {
                *o = dot(a, other.row(j));
            }
        }
        Ok(out)
    }

    /// `selfᵀ · other`
    pub fn t_matmul(&self, other: &Matrix) -> Result<Matrix, LinalgError> {
        if self.rows != other.rows {
            return Err(self.mismatch("t_matmul", other));
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let b = other.row(k);
            for (i, &a) in self.row(k).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                axpy(a, b, &mut out.data[i * other.cols..(i + 1) * other.cols]);
            }
        }
        Ok(out)
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix, LinalgError> {
        self.zip_with("add", other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix, LinalgError> {
        self.zip_with("sub", other, |a, b| a - b)
    }

    /// `self += alpha · other`
    pub fn add_scaled(&mut self, alpha: f64, other: &Matrix) -> Result<(), LinalgError> {
        if self.shape() != other.shape() {
            return Err(self.mismatch("add_scaled", other));
        }
        axpy(alpha, &other.data, &mut self.data);
        Ok(())
    }

    pub fn scale(&self, alpha: f64) -> Matrix {
        self.map(|x| alpha * x)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix::from_raw(self.rows, self.cols, self.data.iter().map(|&x| f(x)).collect())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.frobenius_inner(self).sqrt()
    }

    /// `⟨self, other⟩_F`, panicking on shape mismatch.
    pub fn frobenius_inner(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape(), "frobenius_inner shape mismatch");
        dot(&self.data, &other.data)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix::from_raw(idx.len(), self.cols, data)
    }

    pub fn select_cols(&self, idx: &[usize]) -> Matrix {
        Matrix::from_fn(self.rows, idx.len(), |i, j| self[(i, idx[j])])
    }

    fn zip_with(
        &self,
        op: &'static str,
        other: &Matrix,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Matrix, LinalgError> {
        if self.shape() != other.shape() {
            return Err(self.mismatch(op, other));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Matrix::from_raw(self.rows, self.cols, data))
    }

    fn mismatch(&self, op: &'static str, other: &Matrix) -> LinalgError {
        LinalgError::DimensionMismatch {
            op,
            left: self.shape(),
            right: other.shape(),
        }
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    // Four independent accumulators; the summation order is fixed.
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let k = 4 * c;
        acc[0] += a[k] * b[k];
        acc[1] += a[k + 1] * b[k + 1];
        acc[2] += a[k + 2] * b[k + 2];
        acc[3] += a[k + 3] * b[k + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for k in 4 * chunks..a.len() {
        s += a[k] * b[k];
    }
    s
}

#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
pub(crate) fn norm(x: &[f64]) -> f64 {
    dot(x, x).sqrt()
}

/// Numerically stable `log Σ exp(row)`.
pub fn logsumexp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = row.iter().map(|&x| (x - max).exp()).sum();
    max + s.ln()
}

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for i in 0..out.rows {
        softmax_in_place(out.row_mut(i));
    }
    out
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        s += *x;
    }
    let inv = 1.0 / s;
    for x in row.iter_mut() {
        *x *= inv;
    }
}

/// Row-wise `row − logsumexp(row)`.
pub fn log_softmax_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for i in 0..out.rows {
        let row = out.row_mut(i);
        let lse = logsumexp(row);
        for x in row.iter_mut() {
            *x -= lse;
        }
    }
    out
}

/// Householder QR with column pivoting, `A·P = Q·R`.
///
/// Reflectors are kept in compact form (`v`, `beta`); `Q` is never formed
/// unless columns of it are requested.
#[derive(Debug, Clone)]
pub struct PivotedQr {
    rows: usize,
    cols: usize,
    /// Householder vectors, `reflectors[k]` acts on coordinates `k..rows`.
    reflectors: Vec<(Vec<f64>, f64)>,
    r_diag: Vec<f64>,
    permutation: Vec<usize>,
}

impl PivotedQr {
    pub fn new(m: &Matrix) -> Self {
        let (rows, cols) = m.shape();
        // column-major working copy so that column operations are contiguous
        let mut a: Vec<Vec<f64>> = (0..cols).map(|j| m.column(j)).collect();
        let mut permutation: Vec<usize> = (0..cols).collect();
        let steps = rows.min(cols);
        let mut reflectors = Vec::with_capacity(steps);
        let mut r_diag = Vec::with_capacity(steps);

        for k in 0..steps {
            // Pick the trailing column with the largest remaining norm.
            // Norms are recomputed each step rather than downdated.
            let (pivot, best) = (k..cols)
                .map(|j| (j, dot(&a[j][k..], &a[j][k..])))
                .fold((k, -1.0), |acc, (j, n)| if n > acc.1 { (j, n) } else { acc });
            a.swap(k, pivot);
            permutation.swap(k, pivot);

            let norm_x = best.sqrt();
            if norm_x == 0.0 {
                // Remaining block is exactly zero.
                r_diag.extend(std::iter::repeat_n(0.0, steps - k));
                break;
            }
            let x0 = a[k][k];
            let alpha = if x0 >= 0.0 { -norm_x } else { norm_x };
            let mut v: Vec<f64> = a[k][k..].to_vec();
            v[0] -= alpha;
            let vtv = dot(&v, &v);
            let beta = if vtv == 0.0 { 0.0 } else { 2.0 / vtv };

            for col in a.iter_mut().skip(k + 1) {
                let s = beta * dot(&v, &col[k..]);
                if s != 0.0 {
                    axpy(-s, &v, &mut col[k..]);
                }
            }
            a[k][k] = alpha;
            for x in &mut a[k][k + 1..] {
                *x = 0.0;
            }
            r_diag.push(alpha);
            reflectors.push((v, beta));
        }

        Self {
            rows,
            cols,
            reflectors,
            r_diag,
            permutation,
        }
    }

    /// Diagonal of `R` (signed), length `min(rows, cols)`.
    pub fn r_diagonal(&self) -> &[f64] {
        &self.r_diag
    }

    pub fn permutation(&self) -> &[usize] {
        &self.permutation
    }

    /// Number of `|R_ii| > tol` (strict comparison).
    pub fn rank(&self, tol: f64) -> usize {
        self.r_diag.iter().filter(|d| d.abs() > tol).count()
    }

    /// Column `j` of the full `rows × rows` orthogonal factor `Q`.
    pub fn q_column(&self, j: usize) -> Vec<f64> {
        let mut e = vec![0.0; self.rows];
        e[j] = 1.0;
        for (k, (v, beta)) in self.reflectors.iter().enumerate().rev() {
            let s = beta * dot(v, &e[k..]);
            if s != 0.0 {
                axpy(-s, v, &mut e[k..]);
            }
        }
        e
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }
}

/// Numerical rank: count of `|R_ii| > tol` from pivoted Householder QR.
pub fn qr_rank(m: &Matrix, tol: f64) -> usize {
    PivotedQr::new(m).rank(tol)
}

/// Singular values in nonincreasing order, by one-sided Jacobi rotations.
pub fn singular_values(m: &Matrix) -> Result<Vec<f64>, LinalgError> {
    // Rotate the columns of the tall orientation.
    let tall = if m.rows >= m.cols { m.clone() } else { m.transpose() };
    let n = tall.cols;
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| tall.column(j)).collect();
    let max_sweeps = 100 * n.max(1);
    let eps = 1e-15;

    let mut converged = false;
    for _ in 0..max_sweeps {
        let mut rotated = false;
        for i in 0..n {
            for j in i + 1..n {
                let alpha = dot(&cols[i], &cols[i]);
                let beta = dot(&cols[j], &cols[j]);
                if alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                let gamma = dot(&cols[i], &cols[j]);
                if gamma.abs() <= eps * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (lo, hi) = cols.split_at_mut(j);
                let (ci, cj) = (&mut lo[i], &mut hi[0]);
                for (x, y) in ci.iter_mut().zip(cj.iter_mut()) {
                    let (xv, yv) = (*x, *y);
                    *x = c * xv - s * yv;
                    *y = s * xv + c * yv;
                }
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(LinalgError::SvdNoConvergence { sweeps: max_sweeps });
    }
    let mut sv: Vec<f64> = cols.iter().map(|c| norm(c)).collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    Ok(sv)
}

/// `sqrt(Σ_{i>k} ς_i²)`: the Frobenius error of the best rank-`k` approximation.
pub fn best_rank_k_residual(m: &Matrix, k: usize) -> Result<f64, LinalgError> {
    let sv = singular_values(m)?;
    Ok(sv.iter().skip(k).map(|s| s * s).sum::<f64>().sqrt())
}

/// Orthonormal set of vectors in `ℝ^ambient_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct OrthonormalBasis {
    ambient_dim: usize,
    vectors: Vec<Vec<f64>>,
}

impl OrthonormalBasis {
    /// Wraps vectors after checking they are orthonormal within `1e-10`.
    pub fn new(ambient_dim: usize, vectors: Vec<Vec<f64>>) -> Result<Self, LinalgError> {
        for v in &vectors {
            if v.len() != ambient_dim {
                return Err(LinalgError::EntryCount {
                    expected: ambient_dim,
                    got: v.len(),
                });
            }
        }
        let basis = Self {
            ambient_dim,
            vectors,
        };
        debug_assert!(basis.orthonormality_error() < 1e-10);
        Ok(basis)
    }

    pub fn standard(ambient_dim: usize, coords: impl IntoIterator<Item = usize>) -> Self {
        let vectors = coords
            .into_iter()
            .map(|c| {
                let mut e = vec![0.0; ambient_dim];
                e[c] = 1.0;
                e
            })
            .collect();
        Self {
            ambient_dim,
            vectors,
        }
    }

    pub fn ambient_dim(&self) -> usize {
        self.ambient_dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn vectors(&self) -> &[Vec<f64>] {
        &self.vectors
    }

    /// Largest deviation of the Gram matrix from the identity.
    pub fn orthonormality_error(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for (i, u) in self.vectors.iter().enumerate() {
            for (j, v) in self.vectors.iter().enumerate().skip(i) {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot(u, v) - target).abs());
            }
        }
        worst
    }
}

/// Orthonormal basis of `ker(Wᵀ)` for `W ∈ ℝ^{V×D}`: the trailing `V − r`
/// columns of `Q` from pivoted QR, with `r = qr_rank(W)`.
pub fn kernel_basis(w: &Matrix) -> OrthonormalBasis {
    kernel_basis_with_tol(w, DEFAULT_RANK_TOL)
}

pub fn kernel_basis_with_tol(w: &Matrix, tol: f64) -> OrthonormalBasis {
    let qr = PivotedQr::new(w);
    let r = qr.rank(tol);
    let vectors = (r..w.rows()).map(|j| qr.q_column(j)).collect();
    OrthonormalBasis {
        ambient_dim: w.rows(),
        vectors,
    }
}

/// Orthonormal basis of the column space of `W` (complement of `ker(Wᵀ)`).
pub fn range_basis(w: &Matrix) -> OrthonormalBasis {
    let qr = PivotedQr::new(w);
    let r = qr.rank(DEFAULT_RANK_TOL);
    OrthonormalBasis {
        ambient_dim: w.rows(),
        vectors: (0..r).map(|j| qr.q_column(j)).collect(),
    }
}

/// Replaces each row of `g` by its orthogonal projection onto `span(basis)`.
pub fn project_rows_onto_span(g: &Matrix, basis: &OrthonormalBasis) -> Result<Matrix, LinalgError> {
    if g.cols() != basis.ambient_dim {
        return Err(LinalgError::DimensionMismatch {
            op: "project_rows_onto_span",
            left: g.shape(),
            right: (basis.len(), basis.ambient_dim),
        });
    }
    let mut out = Matrix::zeros(g.rows(), g.cols());
    for i in 0..g.rows() {
        let row = g.row(i);
        let out_row = out.row_mut(i);
        for v in &basis.vectors {
            let c = dot(row, v);
            axpy(c, v, out_row);
        }
    }
    Ok(out)
}
