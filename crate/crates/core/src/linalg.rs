//! Dense row-major matrices and the handful of kernels the morphing
//! pipeline needs: products, normal-equation least squares, column
//! standardization and column-stacking vectorization.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    DimensionMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("buffer of length {len} cannot hold a {rows}x{cols} matrix")]
    BadLength {
        rows: usize,
        cols: usize,
        len: usize,
    },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error(
        "normal equations are singular ({dim}x{dim} gram matrix); \
         pass a positive ridge or use least_squares_with_fallback"
    )]
    Singular { dim: usize },
    #[error("{op}: needs at least {needed} rows, got {got}")]
    TooFewRows {
        op: &'static str,
        needed: usize,
        got: usize,
    },
    #[error("ridge must be a finite non-negative number, got {0}")]
    BadRidge(f64),
}

pub type Result<T> = std::result::Result<T, LinalgError>;

/// Dense row-major `f64` matrix. Every entry is finite.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows.min(6) {
            write!(f, "\n  {:?}", &self.row(i)[..self.cols.min(8)])?;
        }
        if self.rows > 6 {
            write!(f, "\n  ...")?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(LinalgError::BadLength {
                rows,
                cols,
                len: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(LinalgError::NonFinite { op: "from_vec" });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from nested rows; all rows must have equal length.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(LinalgError::BadLength {
                    rows: rows.len(),
                    cols,
                    len: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Self::from_vec(rows.len(), cols, data)
    }

    pub fn from_fn(
        rows: usize,
        cols: usize,
        mut f: impl FnMut(usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self::from_vec(rows, cols, data)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// A single column built from a slice.
    pub fn column_vector(values: &[f64]) -> Result<Self> {
        Self::from_vec(values.len(), 1, values.to_vec())
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
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// Applies `f` to every entry. Fails if `f` produces a non-finite value.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Matrix> {
        let data: Vec<f64> = self.data.iter().map(|&v| f(v)).collect();
        Matrix::from_vec(self.rows, self.cols, data)
    }

    pub fn select_columns(&self, keep: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(self.rows * keep.len());
        for i in 0..self.rows {
            let row = self.row(i);
            data.extend(keep.iter().map(|&j| row[j]));
        }
        Matrix {
            rows: self.rows,
            cols: keep.len(),
            data,
        }
    }

    pub fn select_rows(&self, keep: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(keep.len() * self.cols);
        for &i in keep {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: keep.len(),
            cols: self.cols,
            data,
        }
    }

    /// Horizontal concatenation `[self | other]`.
    pub fn hstack(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(LinalgError::DimensionMismatch {
                op: "hstack",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let cols = self.cols + other.cols;
        let mut data = Vec::with_capacity(self.rows * cols);
        for i in 0..self.rows {
            data.extend_from_slice(self.row(i));
            data.extend_from_slice(other.row(i));
        }
        Ok(Matrix {
            rows: self.rows,
            cols,
            data,
        })
    }

    /// Vertical concatenation of `self` on top of `other`.
    pub fn vstack(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(LinalgError::DimensionMismatch {
                op: "vstack",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Matrix {
            rows: self.rows + other.rows,
            cols: self.cols,
            data,
        })
    }

    /// Multiplies column `j` by `factors[j]`.
    pub fn scale_columns(&self, factors: &[f64]) -> Result<Matrix> {
        if factors.len() != self.cols {
            return Err(LinalgError::DimensionMismatch {
                op: "scale_columns",
                left: self.shape(),
                right: (factors.len(), 1),
            });
        }
        let mut out = self.clone();
        for row in out.data.chunks_exact_mut(self.cols.max(1)) {
            for (v, f) in row.iter_mut().zip(factors) {
                *v *= f;
            }
        }
        out.check_finite("scale_columns")?;
        Ok(out)
    }

    /// Multiplies row `i` by `factors[i]`.
    pub fn scale_rows(&self, factors: &[f64]) -> Result<Matrix> {
        if factors.len() != self.rows {
            return Err(LinalgError::DimensionMismatch {
                op: "scale_rows",
                left: self.shape(),
                right: (factors.len(), 1),
            });
        }
        let mut out = self.clone();
        for (i, f) in factors.iter().enumerate() {
            for v in &mut out.data[i * self.cols..(i + 1) * self.cols] {
                *v *= f;
            }
        }
        out.check_finite("scale_rows")?;
        Ok(out)
    }

    /// Adds `row` to every row (bias broadcast).
    pub fn add_row_broadcast(&self, row: &[f64]) -> Result<Matrix> {
        if row.len() != self.cols {
            return Err(LinalgError::DimensionMismatch {
                op: "add_row_broadcast",
                left: self.shape(),
                right: (1, row.len()),
            });
        }
        let mut out = self.clone();
        for r in out.data.chunks_exact_mut(self.cols.max(1)) {
            for (v, b) in r.iter_mut().zip(row) {
                *v += b;
            }
        }
        out.check_finite("add_row_broadcast")?;
        Ok(out)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(LinalgError::DimensionMismatch {
                op: "sub",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Matrix::from_vec(self.rows, self.cols, data)
    }

    pub fn column_means(&self) -> Vec<f64> {
        let mut means = vec![0.0; self.cols];
        for row in self.data.chunks_exact(self.cols.max(1)) {
            for (m, v) in means.iter_mut().zip(row) {
                *m += v;
            }
        }
        let n = self.rows.max(1) as f64;
        means.iter_mut().for_each(|m| *m /= n);
        means
    }

    pub fn frobenius_norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    fn check_finite(&self, op: &'static str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(LinalgError::NonFinite { op })
        }
    }
}

fn gemm(
    op: &'static str,
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
) -> Result<Matrix> {
    let mut c = vec![0.0; m * n];
    if m > 0 && n > 0 && k > 0 {
        // SAFETY: the strides describe in-bounds views of `a` (m x k) and
        // `b` (k x n); `c` is a fresh m x n row-major buffer.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                0.0,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
    let out = Matrix {
        rows: m,
        cols: n,
        data: c,
    };
    out.check_finite(op)?;
    Ok(out)
}

/// `a * b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(LinalgError::DimensionMismatch {
            op: "matmul",
            left: a.shape(),
            right: b.shape(),
        });
    }
    gemm(
        "matmul",
        a.rows,
        a.cols,
        b.cols,
        &a.data,
        (a.cols as isize, 1),
        &b.data,
        (b.cols as isize, 1),
    )
}

/// `aᵀ * b` without materializing the transpose.
pub fn matmul_tn(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows != b.rows {
        return Err(LinalgError::DimensionMismatch {
            op: "matmul_tn",
            left: a.shape(),
            right: b.shape(),
        });
    }
    gemm(
        "matmul_tn",
        a.cols,
        a.rows,
        b.cols,
        &a.data,
        (1, a.cols as isize),
        &b.data,
        (b.cols as isize, 1),
    )
}

/// `a * bᵀ` without materializing the transpose.
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(LinalgError::DimensionMismatch {
            op: "matmul_nt",
            left: a.shape(),
            right: b.shape(),
        });
    }
    gemm(
        "matmul_nt",
        a.rows,
        a.cols,
        b.rows,
        &a.data,
        (a.cols as isize, 1),
        &b.data,
        (1, b.cols as isize),
    )
}

/// Lower-triangular Cholesky factor of a symmetric matrix, or `None` when a
/// pivot is not safely positive.
fn cholesky(g: &Matrix) -> Option<Matrix> {
    let n = g.rows;
    let max_diag = (0..n).map(|i| g.get(i, i)).fold(0.0, f64::max);
    let floor = max_diag * 1e-13 * n as f64;
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = g.get(j, j);
        for k in 0..j {
            d -= l.data[j * n + k] * l.data[j * n + k];
        }
        if !(d > floor) || d <= 0.0 {
            return None;
        }
        let d = d.sqrt();
        l.data[j * n + j] = d;
        for i in j + 1..n {
            let mut s = g.get(i, j);
            for k in 0..j {
                s -= l.data[i * n + k] * l.data[j * n + k];
            }
            l.data[i * n + j] = s / d;
        }
    }
    Some(l)
}

/// Solves `L Lᵀ W = rhs` in place, column by column.
fn cholesky_solve(l: &Matrix, rhs: &Matrix) -> Matrix {
    let n = l.rows;
    let q = rhs.cols;
    let mut w = rhs.clone();
    for c in 0..q {
        for i in 0..n {
            let mut s = w.data[i * q + c];
            for k in 0..i {
                s -= l.data[i * n + k] * w.data[k * q + c];
            }
            w.data[i * q + c] = s / l.data[i * n + i];
        }
        for i in (0..n).rev() {
            let mut s = w.data[i * q + c];
            for k in i + 1..n {
                s -= l.data[k * n + i] * w.data[k * q + c];
            }
            w.data[i * q + c] = s / l.data[i * n + i];
        }
    }
    w
}

/// Outcome of a least-squares solve.
#[derive(Debug, Clone, PartialEq)]
pub struct LeastSquaresFit {
    pub weights: Matrix,
    /// Ridge actually applied to the gram matrix.
    pub ridge: f64,
    /// True when the requested ridge was singular and a fallback ridge was used.
    pub fell_back: bool,
}

fn gram_with_ridge(gram: &Matrix, ridge: f64) -> Matrix {
    let mut g = gram.clone();
    let p = g.rows;
    for i in 0..p {
        g.data[i * p + i] += ridge;
    }
    g
}

/// Solves against the factor of `xᵀx + μI`, then refines with the true
/// residual: `w ← w + (xᵀx + μI)⁻¹ (xᵀ(y − xw) − ridge·w)`.
///
/// With `μ = ridge` this is iterative refinement of the ridge solution. With
/// a larger fallback `μ` it is iterated Tikhonov, which removes the extra
/// regularization along every direction the data determines.
fn solve_refined(
    x: &Matrix,
    y: &Matrix,
    gram: &Matrix,
    xty: &Matrix,
    mu: f64,
    ridge: f64,
    max_steps: usize,
) -> Option<Matrix> {
    let l = cholesky(&gram_with_ridge(gram, mu))?;
    let mut w = cholesky_solve(&l, xty);
    for _ in 0..max_steps {
        let resid = y.sub(&matmul(x, &w).ok()?).ok()?;
        let mut grad = matmul_tn(x, &resid).ok()?;
        if ridge > 0.0 {
            for (g, v) in grad.data.iter_mut().zip(&w.data) {
                *g -= ridge * v;
            }
        }
        let dw = cholesky_solve(&l, &grad);
        let step = dw.max_abs();
        for (a, b) in w.data.iter_mut().zip(&dw.data) {
            *a += b;
        }
        if !(step > 1e-15 * w.max_abs()) {
            break;
        }
    }
    w.check_finite("least_squares").ok()?;
    Some(w)
}

fn check_lstsq_inputs(x: &Matrix, y: &Matrix, ridge: f64) -> Result<()> {
    if !(ridge >= 0.0) || !ridge.is_finite() {
        return Err(LinalgError::BadRidge(ridge));
    }
    if x.rows != y.rows {
        return Err(LinalgError::DimensionMismatch {
            op: "least_squares",
            left: x.shape(),
            right: y.shape(),
        });
    }
    if x.rows == 0 {
        return Err(LinalgError::TooFewRows {
            op: "least_squares",
            needed: 1,
            got: 0,
        });
    }
    Ok(())
}

/// `argmin_W ‖y − xW‖²_F + ridge·‖W‖²_F` via the normal equations.
///
/// Fails with [`LinalgError::Singular`] when `xᵀx + ridge·I` is not
/// numerically positive definite.
pub fn least_squares(x: &Matrix, y: &Matrix, ridge: f64) -> Result<Matrix> {
    check_lstsq_inputs(x, y, ridge)?;
    let gram = matmul_tn(x, x)?;
    let xty = matmul_tn(x, y)?;
    solve_refined(x, y, &gram, &xty, ridge, ridge, 4).ok_or(LinalgError::Singular { dim: x.cols })
}

/// Like [`least_squares`], but retries a singular system with
/// `ridge = 1e-8 · trace(xᵀx) / p` and reports that it did so.
///
/// The fallback ridge is only used to factor; refinement then converges to
/// the solution for the requested ridge along every direction the data
/// determines, and to zero along the others.
pub fn least_squares_with_fallback(x: &Matrix, y: &Matrix, ridge: f64) -> Result<LeastSquaresFit> {
    check_lstsq_inputs(x, y, ridge)?;
    let gram = matmul_tn(x, x)?;
    let xty = matmul_tn(x, y)?;
    if let Some(weights) = solve_refined(x, y, &gram, &xty, ridge, ridge, 4) {
        return Ok(LeastSquaresFit {
            weights,
            ridge,
            fell_back: false,
        });
    }
    let p = x.cols.max(1) as f64;
    let trace: f64 = (0..x.cols).map(|i| gram.get(i, i)).sum();
    let mut fallback = (1e-8 * trace / p).max(ridge);
    if fallback <= 0.0 {
        fallback = 1e-8;
    }
    // A second, larger retry covers gram matrices whose spectrum is wide
    // enough that the first fallback is still below the pivot floor.
    for scale in [1.0, 1e3] {
        let mu = fallback * scale;
        if let Some(weights) = solve_refined(x, y, &gram, &xty, mu, ridge, 200) {
            return Ok(LeastSquaresFit {
                weights,
                ridge: mu,
                fell_back: true,
            });
        }
    }
    Err(LinalgError::Singular { dim: x.cols })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StandardizeMode {
    CenterOnly,
    CenterAndScale,
}

/// Per-column affine map produced by [`standardize_columns`].
#[derive(Debug, Clone, PartialEq)]
pub struct StandardizeInfo {
    pub means: Vec<f64>,
    /// Always positive; 1.0 for constant columns and in center-only mode.
    pub scales: Vec<f64>,
    /// Columns with zero variance. Under center-and-scale they come out as
    /// all zeros rather than unit length.
    pub constant: Vec<bool>,
}

impl StandardizeInfo {
    pub fn apply(&self, m: &Matrix) -> Result<Matrix> {
        self.check(m)?;
        let mut out = m.clone();
        for row in out.data.chunks_exact_mut(m.cols.max(1)) {
            for j in 0..row.len() {
                row[j] = (row[j] - self.means[j]) / self.scales[j];
            }
        }
        Ok(out)
    }

    pub fn invert(&self, m: &Matrix) -> Result<Matrix> {
        self.check(m)?;
        let mut out = m.clone();
        for row in out.data.chunks_exact_mut(m.cols.max(1)) {
            for j in 0..row.len() {
                row[j] = row[j] * self.scales[j] + self.means[j];
            }
        }
        Ok(out)
    }

    fn check(&self, m: &Matrix) -> Result<()> {
        if m.cols != self.means.len() {
            return Err(LinalgError::DimensionMismatch {
                op: "standardize",
                left: m.shape(),
                right: (1, self.means.len()),
            });
        }
        Ok(())
    }

    pub fn constant_columns(&self) -> Vec<usize> {
        self.constant
            .iter()
            .enumerate()
            .filter_map(|(j, &c)| c.then_some(j))
            .collect()
    }
}

/// Centers each column, and under [`StandardizeMode::CenterAndScale`] also
/// scales it so that `colᵀcol == rows`.
pub fn standardize_columns(m: &Matrix, mode: StandardizeMode) -> Result<(Matrix, StandardizeInfo)> {
    if m.rows < 2 {
        return Err(LinalgError::TooFewRows {
            op: "standardize_columns",
            needed: 2,
            got: m.rows,
        });
    }
    let n = m.rows as f64;
    let means = m.column_means();
    let mut ss = vec![0.0; m.cols];
    let mut raw = vec![0.0; m.cols];
    for row in m.data.chunks_exact(m.cols.max(1)) {
        for j in 0..row.len() {
            let d = row[j] - means[j];
            ss[j] += d * d;
            raw[j] += row[j] * row[j];
        }
    }
    let constant: Vec<bool> = ss
        .iter()
        .zip(&raw)
        .map(|(&s, &r)| s == 0.0 || s <= 16.0 * f64::EPSILON * f64::EPSILON * r)
        .collect();
    let scales: Vec<f64> = match mode {
        StandardizeMode::CenterOnly => vec![1.0; m.cols],
        StandardizeMode::CenterAndScale => ss
            .iter()
            .zip(&constant)
            .map(|(&s, &c)| if c { 1.0 } else { (s / n).sqrt() })
            .collect(),
    };
    let info = StandardizeInfo {
        means,
        scales,
        constant,
    };
    let mut out = info.apply(m)?;
    if mode == StandardizeMode::CenterAndScale {
        for row in out.data.chunks_exact_mut(m.cols.max(1)) {
            for j in info.constant_columns() {
                row[j] = 0.0;
            }
        }
    }
    Ok((out, info))
}

/// Column-stacking `vec(·)`.
pub fn vectorize(m: &Matrix) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.rows * m.cols);
    for j in 0..m.cols {
        out.extend((0..m.rows).map(|i| m.get(i, j)));
    }
    out
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
