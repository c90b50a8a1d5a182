//! Similarity-penalized Lasso ("independently interpretable Lasso") over a
//! vector of per-neuron scale factors `β`.
//!
//! Both solvers minimize a least-squares datafit plus
//! `λ (‖β‖₁ + α/2 · |β|ᵀ R |β|)` by cyclic coordinate descent, where `R`
//! penalizes keeping two similar neurons at once. With `α = 0` they reduce
//! to plain Lasso.
//!
//! * [`DiagSolver`] handles the per-column problem
//!   `1/(2N) Σ_j ‖o_j − β_j x_j‖²`, in which each neuron scales its own column.
//! * [`ResidualSolver`] handles `1/(2N·D₂) ‖y − Σ_i β_i t_i‖²_F`, in which every
//!   neuron contributes an `N × D₂` term to a shared reconstruction. It works
//!   on the stacked design `[vec(t_1) … vec(t_Dn)]`.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, LinalgError, Matrix};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SparseError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("column {column} is not standardized: colᵀcol = {norm_sq}, expected {expected}")]
    NotStandardized {
        column: usize,
        norm_sq: f64,
        expected: f64,
    },
    #[error("objective became non-finite after {} sweeps", trace.len())]
    NonFinite { trace: Vec<f64> },
    #[error("invalid sparse config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

pub type Result<T> = std::result::Result<T, SparseError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SparseConfig {
    pub lambda: f64,
    pub alpha: f64,
    pub max_itr: usize,
    /// Stop once at most this many coordinates are nonzero.
    pub target_nnz: usize,
    /// Stop once a full sweep moves no coordinate by `tol` or more.
    pub tol: f64,
    /// Upper bound on entries of the similarity matrix.
    pub r_cap: f64,
}

impl Default for SparseConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            alpha: 0.1,
            max_itr: 1000,
            target_nnz: 0,
            tol: 1e-7,
            r_cap: 1e6,
        }
    }
}

impl SparseConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(SparseError::BadConfig(m.to_string()));
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return bad("lambda must be finite and non-negative");
        }
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return bad("alpha must be finite and non-negative");
        }
        if self.max_itr == 0 {
            return bad("max_itr must be at least 1");
        }
        if !(self.tol > 0.0) {
            return bad("tol must be positive");
        }
        if !(self.r_cap > 0.0) || !self.r_cap.is_finite() {
            return bad("r_cap must be finite and positive");
        }
        Ok(())
    }
}

/// Symmetric, non-negative, zero-diagonal penalty matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    r: Matrix,
}

impl SimilarityMatrix {
    /// Wraps an explicit matrix after checking symmetry, sign and diagonal.
    pub fn from_matrix(r: Matrix) -> Result<Self> {
        let n = r.rows();
        if r.cols() != n {
            return Err(SparseError::Shape(format!(
                "similarity matrix must be square, got {:?}",
                r.shape()
            )));
        }
        for i in 0..n {
            if r.get(i, i) != 0.0 {
                return Err(SparseError::Shape(format!("diagonal entry {i} is nonzero")));
            }
            for j in 0..n {
                let v = r.get(i, j);
                if v < 0.0 || (v - r.get(j, i)).abs() > 1e-12 * v.abs().max(1.0) {
                    return Err(SparseError::Shape(format!(
                        "entry ({i}, {j}) breaks symmetry or sign"
                    )));
                }
            }
        }
        Ok(Self { r })
    }

    /// The all-zero matrix, which turns iiLasso into plain Lasso.
    pub fn zeros(n: usize) -> Self {
        Self {
            r: Matrix::zeros(n, n),
        }
    }

    pub fn dim(&self) -> usize {
        self.r.rows()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.r
    }

    #[inline]
    pub fn get(&self, j: usize, k: usize) -> f64 {
        self.r.get(j, k)
    }

    pub fn row(&self, j: usize) -> &[f64] {
        self.r.row(j)
    }
}

/// Builds `R` from standardized columns: `r_jk = |x_jᵀx_k| / N` and
/// `R_jk = r_jk / (1 − r_jk)` off the diagonal, capped at `cfg.r_cap`.
pub fn similarity_matrix(x: &Matrix, cfg: &SparseConfig) -> Result<SimilarityMatrix> {
    let cols: Vec<Vec<f64>> = (0..x.cols()).map(|j| x.column(j)).collect();
    similarity_from_columns(&cols, cfg)
}

/// [`similarity_matrix`] for a design given as its columns, each of squared
/// norm equal to its length.
pub fn similarity_from_columns(cols: &[Vec<f64>], cfg: &SparseConfig) -> Result<SimilarityMatrix> {
    let d = cols.len();
    let n = cols.first().map_or(0, Vec::len) as f64;
    for (j, c) in cols.iter().enumerate() {
        if c.len() as f64 != n {
            return Err(SparseError::Shape(format!(
                "column {j} has {} entries, expected {n}",
                c.len()
            )));
        }
        let norm_sq = linalg::dot(c, c);
        if (norm_sq - n).abs() > 1e-6 * n {
            return Err(SparseError::NotStandardized {
                column: j,
                norm_sq,
                expected: n,
            });
        }
    }
    let mut r = vec![0.0; d * d];
    for j in 0..d {
        for k in j + 1..d {
            let corr = (linalg::dot(&cols[j], &cols[k]).abs() / n).min(1.0);
            let pen = if corr >= 1.0 {
                cfg.r_cap
            } else {
                (corr / (1.0 - corr)).min(cfg.r_cap)
            };
            r[j * d + k] = pen;
            r[k * d + j] = pen;
        }
    }
    Ok(SimilarityMatrix {
        r: Matrix::from_vec(d, d, r)?,
    })
}

/// `sgn(a) · max(|a| − b, 0)`.
#[inline]
pub fn soft_threshold(a: f64, b: f64) -> f64 {
    debug_assert!(b >= 0.0);
    if a > b {
        a - b
    } else if a < -b {
        a + b
    } else {
        0.0
    }
}

/// `λ (‖β‖₁ + α/2 · |β|ᵀ R |β|)`.
pub fn penalty(beta: &[f64], r: &SimilarityMatrix, cfg: &SparseConfig) -> f64 {
    let abs: Vec<f64> = beta.iter().map(|b| b.abs()).collect();
    let l1: f64 = abs.iter().sum();
    let mut quad = 0.0;
    for (j, bj) in abs.iter().enumerate() {
        if *bj != 0.0 {
            quad += bj * linalg::dot(r.row(j), &abs);
        }
    }
    cfg.lambda * (l1 + 0.5 * cfg.alpha * quad)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Converged,
    MaxItr,
    TargetNnz,
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StopReason::Converged => "converged",
            StopReason::MaxItr => "max_itr",
            StopReason::TargetNnz => "target_nnz",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseSolution {
    pub beta: Vec<f64>,
    pub active_set: Vec<usize>,
    /// Objective after every sweep.
    pub objective_trace: Vec<f64>,
    pub sweeps_run: usize,
    pub stop_reason: StopReason,
}

impl SparseSolution {
    pub fn nnz(&self) -> usize {
        self.active_set.len()
    }
}

fn active_set(beta: &[f64]) -> Vec<usize> {
    beta.iter()
        .enumerate()
        .filter_map(|(j, &b)| (b != 0.0).then_some(j))
        .collect()
}

/// `1 / (1 + αλR_jj)`. The diagonal of `R` is zero, so this is exactly 1,
/// but the general form is kept.
#[inline]
pub fn diagonal_prefactor(r: &SimilarityMatrix, cfg: &SparseConfig, j: usize) -> f64 {
    1.0 / (1.0 + cfg.alpha * cfg.lambda * r.get(j, j))
}

/// Threshold `λ(1 + α Σ_{c≠j} R_jc |β_c|)` for coordinate `j`.
#[inline]
fn coupled_threshold(beta: &[f64], r: &SimilarityMatrix, cfg: &SparseConfig, j: usize) -> f64 {
    let row = r.row(j);
    let mut s = 0.0;
    for (c, b) in beta.iter().enumerate() {
        if c != j && *b != 0.0 {
            s += row[c] * b.abs();
        }
    }
    cfg.lambda * (1.0 + cfg.alpha * s)
}

/// Shared coordinate-descent driver.
trait Coordinates {
    fn dim(&self) -> usize;
    fn beta(&self) -> &[f64];
    fn update_coordinate(&mut self, j: usize) -> f64;
    fn objective(&self) -> f64;
    fn end_of_sweep(&mut self) {}
}

fn run_descent<C: Coordinates>(solver: &mut C, cfg: &SparseConfig) -> Result<SparseSolution> {
    let mut trace = Vec::new();
    let mut delta = f64::INFINITY;
    let mut sweeps = 0;
    let stop_reason = loop {
        let nnz = solver.beta().iter().filter(|b| **b != 0.0).count();
        if delta < cfg.tol {
            break StopReason::Converged;
        }
        if nnz <= cfg.target_nnz {
            break StopReason::TargetNnz;
        }
        if sweeps >= cfg.max_itr {
            break StopReason::MaxItr;
        }
        delta = 0.0;
        for j in 0..solver.dim() {
            let old = solver.beta()[j];
            let new = solver.update_coordinate(j);
            delta = f64::max(delta, (new - old).abs());
        }
        solver.end_of_sweep();
        sweeps += 1;
        let obj = solver.objective();
        trace.push(obj);
        if !obj.is_finite() {
            return Err(SparseError::NonFinite { trace });
        }
    };
    let beta = solver.beta().to_vec();
    Ok(SparseSolution {
        active_set: active_set(&beta),
        beta,
        objective_trace: trace,
        sweeps_run: sweeps,
        stop_reason,
    })
}

fn check_standardized(x: &Matrix) -> Result<()> {
    let n = x.rows() as f64;
    for j in 0..x.cols() {
        let c = x.column(j);
        let norm_sq = linalg::dot(&c, &c);
        if (norm_sq - n).abs() > 1e-6 * n {
            return Err(SparseError::NotStandardized {
                column: j,
                norm_sq,
                expected: n,
            });
        }
    }
    Ok(())
}

fn initial_beta(dim: usize, beta0: Option<Vec<f64>>) -> Result<Vec<f64>> {
    match beta0 {
        None => Ok(vec![1.0; dim]),
        Some(b) if b.len() == dim && b.iter().all(|v| v.is_finite()) => Ok(b),
        Some(b) => Err(SparseError::Shape(format!(
            "initial beta has length {} (expected {dim}) or non-finite entries",
            b.len()
        ))),
    }
}

/// Coordinate descent for `1/(2N) Σ_j ‖o_j − β_j x_j‖² + penalty`.
///
/// Columns of `x` must be standardized (`x_jᵀx_j = N`), which makes the
/// closed-form coordinate step exact.
#[derive(Debug, Clone)]
pub struct DiagSolver<'a> {
    r: &'a SimilarityMatrix,
    cfg: SparseConfig,
    beta: Vec<f64>,
    /// `o_jᵀx_j / N`
    cross: Vec<f64>,
    /// `x_jᵀx_j / N`
    x_sq: Vec<f64>,
    /// `o_jᵀo_j / N`
    o_sq: Vec<f64>,
}

impl<'a> DiagSolver<'a> {
    pub fn new(
        x: &Matrix,
        o: &Matrix,
        r: &'a SimilarityMatrix,
        cfg: &SparseConfig,
        beta0: Option<Vec<f64>>,
    ) -> Result<Self> {
        cfg.validate()?;
        if x.shape() != o.shape() {
            return Err(SparseError::Shape(format!(
                "x is {:?} but o is {:?}",
                x.shape(),
                o.shape()
            )));
        }
        if r.dim() != x.cols() {
            return Err(SparseError::Shape(format!(
                "similarity matrix is {0}x{0} for {1} columns",
                r.dim(),
                x.cols()
            )));
        }
        if x.rows() == 0 {
            return Err(SparseError::Shape("no rows".into()));
        }
        check_standardized(x)?;
        let n = x.rows() as f64;
        let mut cross = Vec::with_capacity(x.cols());
        let mut x_sq = Vec::with_capacity(x.cols());
        let mut o_sq = Vec::with_capacity(x.cols());
        for j in 0..x.cols() {
            let xc = x.column(j);
            let oc = o.column(j);
            cross.push(linalg::dot(&oc, &xc) / n);
            x_sq.push(linalg::dot(&xc, &xc) / n);
            o_sq.push(linalg::dot(&oc, &oc) / n);
        }
        Ok(Self {
            r,
            cfg: *cfg,
            beta: initial_beta(x.cols(), beta0)?,
            cross,
            x_sq,
            o_sq,
        })
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    /// Closed-form minimizer of coordinate `j` with the others held fixed.
    pub fn coordinate_minimizer(&self, j: usize) -> f64 {
        let thresh = coupled_threshold(&self.beta, self.r, &self.cfg, j);
        diagonal_prefactor(self.r, &self.cfg, j) * soft_threshold(self.cross[j], thresh)
    }

    pub fn update_coordinate(&mut self, j: usize) -> f64 {
        self.beta[j] = self.coordinate_minimizer(j);
        self.beta[j]
    }

    pub fn datafit(&self) -> f64 {
        0.5 * (0..self.beta.len())
            .map(|j| {
                self.o_sq[j] - 2.0 * self.beta[j] * self.cross[j]
                    + self.beta[j] * self.beta[j] * self.x_sq[j]
            })
            .sum::<f64>()
    }

    pub fn objective(&self) -> f64 {
        self.datafit() + penalty(&self.beta, self.r, &self.cfg)
    }

    pub fn run(mut self) -> Result<SparseSolution> {
        let cfg = self.cfg;
        run_descent(&mut self, &cfg)
    }
}

impl Coordinates for DiagSolver<'_> {
    fn dim(&self) -> usize {
        self.beta.len()
    }
    fn beta(&self) -> &[f64] {
        &self.beta
    }
    fn update_coordinate(&mut self, j: usize) -> f64 {
        DiagSolver::update_coordinate(self, j)
    }
    fn objective(&self) -> f64 {
        DiagSolver::objective(self)
    }
}

/// Solves the per-column problem starting from `β = 1`.
pub fn iilasso_diag(
    x: &Matrix,
    o: &Matrix,
    r: &SimilarityMatrix,
    cfg: &SparseConfig,
) -> Result<SparseSolution> {
    DiagSolver::new(x, o, r, cfg, None)?.run()
}

/// Coordinate descent for `1/(2M) ‖y − Σ_i β_i t_i‖² + penalty` with
/// `M = N·D₂` and every `vec(t_i)` scaled to squared norm `M`.
#[derive(Debug, Clone)]
pub struct ResidualSolver<'a> {
    r: &'a SimilarityMatrix,
    cfg: SparseConfig,
    beta: Vec<f64>,
    /// `vec(t_i)` for every neuron.
    columns: Vec<Vec<f64>>,
    col_sq: Vec<f64>,
    target: Vec<f64>,
    residual: Vec<f64>,
}

impl<'a> ResidualSolver<'a> {
    /// From the per-neuron `N × D₂` terms and the `N × D₂` target.
    pub fn new(
        t: &[Matrix],
        y: &Matrix,
        r: &'a SimilarityMatrix,
        cfg: &SparseConfig,
        beta0: Option<Vec<f64>>,
    ) -> Result<Self> {
        if let Some((i, ti)) = t.iter().enumerate().find(|(_, ti)| ti.shape() != y.shape()) {
            return Err(SparseError::Shape(format!(
                "t[{i}] is {:?} but y is {:?}",
                ti.shape(),
                y.shape()
            )));
        }
        let columns = t.iter().map(linalg::vectorize).collect();
        Self::from_stacked(columns, linalg::vectorize(y), r, cfg, beta0)
    }

    /// From the stacked design, given as its columns `vec(t_i)`, and `vec(y)`.
    pub fn from_stacked(
        columns: Vec<Vec<f64>>,
        target: Vec<f64>,
        r: &'a SimilarityMatrix,
        cfg: &SparseConfig,
        beta0: Option<Vec<f64>>,
    ) -> Result<Self> {
        cfg.validate()?;
        let m = target.len();
        if m == 0 {
            return Err(SparseError::Shape("empty target".into()));
        }
        if r.dim() != columns.len() {
            return Err(SparseError::Shape(format!(
                "similarity matrix is {0}x{0} for {1} terms",
                r.dim(),
                columns.len()
            )));
        }
        let mut col_sq = Vec::with_capacity(columns.len());
        for (i, c) in columns.iter().enumerate() {
            if c.len() != m {
                return Err(SparseError::Shape(format!(
                    "term {i} has {} entries, expected {m}",
                    c.len()
                )));
            }
            let norm_sq = linalg::dot(c, c);
            if (norm_sq - m as f64).abs() > 1e-6 * m as f64 {
                return Err(SparseError::NotStandardized {
                    column: i,
                    norm_sq,
                    expected: m as f64,
                });
            }
            col_sq.push(norm_sq / m as f64);
        }
        let beta = initial_beta(columns.len(), beta0)?;
        let mut solver = Self {
            r,
            cfg: *cfg,
            beta,
            columns,
            col_sq,
            residual: Vec::new(),
            target,
        };
        solver.refresh_residual();
        Ok(solver)
    }

    fn refresh_residual(&mut self) {
        let mut res = self.target.clone();
        for (c, b) in self.columns.iter().zip(&self.beta) {
            if *b != 0.0 {
                for (r, v) in res.iter_mut().zip(c) {
                    *r -= b * v;
                }
            }
        }
        self.residual = res;
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn residual(&self) -> &[f64] {
        &self.residual
    }

    /// `[vec(y) − Σ_{i≠j} β_i vec(t_i)]ᵀ vec(t_j) / M`.
    fn partial_correlation(&self, j: usize) -> f64 {
        let m = self.target.len() as f64;
        linalg::dot(&self.residual, &self.columns[j]) / m + self.beta[j] * self.col_sq[j]
    }

    pub fn coordinate_minimizer(&self, j: usize) -> f64 {
        let thresh = coupled_threshold(&self.beta, self.r, &self.cfg, j);
        diagonal_prefactor(self.r, &self.cfg, j)
            * soft_threshold(self.partial_correlation(j), thresh)
    }

    pub fn update_coordinate(&mut self, j: usize) -> f64 {
        let new = self.coordinate_minimizer(j);
        let step = new - self.beta[j];
        if step != 0.0 {
            for (r, v) in self.residual.iter_mut().zip(&self.columns[j]) {
                *r -= step * v;
            }
        }
        self.beta[j] = new;
        new
    }

    pub fn datafit(&self) -> f64 {
        0.5 * linalg::dot(&self.residual, &self.residual) / self.target.len() as f64
    }

    pub fn objective(&self) -> f64 {
        self.datafit() + penalty(&self.beta, self.r, &self.cfg)
    }

    pub fn run(mut self) -> Result<SparseSolution> {
        let cfg = self.cfg;
        run_descent(&mut self, &cfg)
    }
}

impl Coordinates for ResidualSolver<'_> {
    fn dim(&self) -> usize {
        self.beta.len()
    }
    fn beta(&self) -> &[f64] {
        &self.beta
    }
    fn update_coordinate(&mut self, j: usize) -> f64 {
        ResidualSolver::update_coordinate(self, j)
    }
    fn objective(&self) -> f64 {
        ResidualSolver::objective(self)
    }
    fn end_of_sweep(&mut self) {
        // Incremental residual updates drift; resync once per sweep.
        self.refresh_residual();
    }
}

/// Solves the shared-reconstruction problem starting from `β = 1`.
pub fn iilasso_residual(
    t: &[Matrix],
    y: &Matrix,
    r: &SimilarityMatrix,
    cfg: &SparseConfig,
) -> Result<SparseSolution> {
    ResidualSolver::new(t, y, r, cfg, None)?.run()
}

/// Refits `W` in `min ‖o_new − a1 · W · diag(β)‖²_F` with `β` held fixed.
///
/// Active columns are `(1/β_j) · lstsq(a1, o_new_j)`; columns with `β_j = 0`
/// are returned as zeros. Returns the weights and whether the least-squares
/// solve needed the ridge fallback.
pub fn refit_w1(a1: &Matrix, o_new: &Matrix, beta: &[f64], ridge: f64) -> Result<(Matrix, bool)> {
    if o_new.cols() != beta.len() || a1.rows() != o_new.rows() {
        return Err(SparseError::Shape(format!(
            "a1 {:?}, o_new {:?}, beta {}",
            a1.shape(),
            o_new.shape(),
            beta.len()
        )));
    }
    if beta.iter().any(|b| !b.is_finite()) {
        return Err(SparseError::Shape("beta has non-finite entries".into()));
    }
    let active = active_set(beta);
    let mut w = Matrix::zeros(a1.cols(), beta.len());
    if active.is_empty() {
        return Ok((w, false));
    }
    let fit = linalg::least_squares_with_fallback(a1, &o_new.select_columns(&active), ridge)?;
    let inv: Vec<f64> = active.iter().map(|&j| 1.0 / beta[j]).collect();
    let solved = fit.weights.scale_columns(&inv)?;
    let mut data = w.into_vec();
    let cols = beta.len();
    for i in 0..a1.cols() {
        for (k, &j) in active.iter().enumerate() {
            data[i * cols + j] = solved.get(i, k);
        }
    }
    w = Matrix::from_vec(a1.cols(), cols, data)?;
    Ok((w, fit.fell_back))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{standardize_columns, StandardizeMode};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0)).unwrap()
    }

    fn standardized(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        standardize_columns(&random(rows, cols, rng), StandardizeMode::CenterAndScale)
            .unwrap()
            .0
    }

    /// Reference objective for the per-column problem, from raw matrices.
    fn diag_objective(
        x: &Matrix,
        o: &Matrix,
        beta: &[f64],
        r: &SimilarityMatrix,
        cfg: &SparseConfig,
    ) -> f64 {
        let n = x.rows() as f64;
        let mut fit = 0.0;
        for j in 0..x.cols() {
            for i in 0..x.rows() {
                fit += (o.get(i, j) - beta[j] * x.get(i, j)).powi(2);
            }
        }
        let mut quad = 0.0;
        for j in 0..beta.len() {
            for k in 0..beta.len() {
                quad += r.get(j, k) * beta[j].abs() * beta[k].abs();
            }
        }
        let l1: f64 = beta.iter().map(|b| b.abs()).sum();
        fit / (2.0 * n) + cfg.lambda * (l1 + cfg.alpha / 2.0 * quad)
    }

    /// Independent plain-Lasso coordinate descent for the per-column problem.
    fn plain_lasso_diag(x: &Matrix, o: &Matrix, lambda: f64) -> Vec<f64> {
        let n = x.rows() as f64;
        (0..x.cols())
            .map(|j| {
                let xc = x.column(j);
                let oc = o.column(j);
                let a: f64 = xc.iter().zip(&oc).map(|(p, q)| p * q).sum::<f64>() / n;
                let c: f64 = xc.iter().map(|p| p * p).sum::<f64>() / n;
                a.signum() * (a.abs() - lambda).max(0.0) / c
            })
            .collect()
    }

    #[test]
    fn soft_threshold_cases() {
        assert_eq!(soft_threshold(3.0, 1.0), 2.0);
        assert_eq!(soft_threshold(-3.0, 1.0), -2.0);
        assert_eq!(soft_threshold(0.5, 1.0), 0.0);
        assert_eq!(soft_threshold(-0.5, 1.0), 0.0);
    }

    #[test]
    fn orthogonal_columns_have_zero_similarity() {
        let x = Matrix::from_rows(&[[1.0, 1.0], [1.0, -1.0], [-1.0, 1.0], [-1.0, -1.0]]).unwrap();
        let r = similarity_matrix(&x, &SparseConfig::default()).unwrap();
        assert_eq!(r.matrix(), &Matrix::zeros(2, 2));
    }

    #[test]
    fn duplicate_columns_hit_the_cap() {
        let x = Matrix::from_rows(&[[1.0, 1.0], [-1.0, -1.0]]).unwrap();
        let cfg = SparseConfig::default();
        let r = similarity_matrix(&x, &cfg).unwrap();
        assert_eq!(r.get(0, 1), cfg.r_cap);
        assert_eq!(r.get(1, 0), cfg.r_cap);
        assert_eq!(r.get(0, 0), 0.0);
    }

    #[test]
    fn half_correlation_gives_unit_penalty() {
        // Columns with x_0ᵀx_1 / N = 0.5 exactly.
        let col0 = [1.0, 1.0, 1.0, 1.0, -1.0, -1.0, -1.0, -1.0];
        let col1 = [1.0, 1.0, 1.0, -1.0, 1.0, -1.0, -1.0, -1.0];
        let x = Matrix::from_fn(8, 2, |i, j| if j == 0 { col0[i] } else { col1[i] }).unwrap();
        let r = similarity_matrix(&x, &SparseConfig::default()).unwrap();
        assert!((r.get(0, 1) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn similarity_rejects_unstandardized() {
        let x = Matrix::from_rows(&[[3.0], [0.0]]).unwrap();
        assert!(matches!(
            similarity_matrix(&x, &SparseConfig::default()),
            Err(SparseError::NotStandardized { column: 0, .. })
        ));
    }

    #[test]
    fn similarity_invariants_on_random_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = standardized(30, 6, &mut rng);
        let cfg = SparseConfig {
            r_cap: 5.0,
            ..SparseConfig::default()
        };
        let r = similarity_matrix(&x, &cfg).unwrap();
        SimilarityMatrix::from_matrix(r.matrix().clone()).unwrap();
        assert!(r
            .matrix()
            .as_slice()
            .iter()
            .all(|&v| (0.0..=5.0).contains(&v)));
        for j in 0..6 {
            assert_eq!(diagonal_prefactor(&r, &cfg, j), 1.0);
        }
    }

    #[test]
    fn diag_without_penalty_returns_ones() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = standardized(20, 4, &mut rng);
        let cfg = SparseConfig {
            lambda: 0.0,
            ..SparseConfig::default()
        };
        let r = similarity_matrix(&x, &cfg).unwrap();
        let sol = iilasso_diag(&x, &x, &r, &cfg).unwrap();
        for b in &sol.beta {
            assert!((b - 1.0).abs() < 1e-12);
        }
        assert_eq!(sol.stop_reason, StopReason::Converged);
    }

    #[test]
    fn diag_large_lambda_zeroes_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = standardized(20, 4, &mut rng);
        let o = standardized(20, 4, &mut rng);
        let n = 20.0;
        let max_corr = (0..4)
            .map(|j| (linalg::dot(&o.column(j), &x.column(j)) / n).abs())
            .fold(0.0, f64::max);
        let cfg = SparseConfig {
            lambda: max_corr,
            alpha: 0.0,
            ..SparseConfig::default()
        };
        let sol = iilasso_diag(&x, &o, &SimilarityMatrix::zeros(4), &cfg).unwrap();
        assert!(sol.beta.iter().all(|&b| b == 0.0));
        assert!(sol.active_set.is_empty());
        assert_eq!(sol.stop_reason, StopReason::TargetNnz);
    }

    #[test]
    fn diag_matches_grid_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = standardized(30, 3, &mut rng);
        // Target correlated with x so the optimum is interior.
        let noise = random(30, 3, &mut rng);
        let o_raw =
            Matrix::from_fn(30, 3, |i, j| 0.8 * x.get(i, j) + 0.3 * noise.get(i, j)).unwrap();
        let o = standardize_columns(&o_raw, StandardizeMode::CenterAndScale)
            .unwrap()
            .0;
        let cfg = SparseConfig {
            lambda: 0.1,
            alpha: 0.1,
            tol: 1e-12,
            ..SparseConfig::default()
        };
        let r = similarity_matrix(&x, &cfg).unwrap();
        let sol = iilasso_diag(&x, &o, &r, &cfg).unwrap();
        let best = diag_objective(&x, &o, &sol.beta, &r, &cfg);
        let mut grid_best = f64::INFINITY;
        // Coarse grid, then a fine local grid around its best point.
        let eval = |beta: [f64; 3]| diag_objective(&x, &o, &beta, &r, &cfg);
        let mut coarse = [0.0; 3];
        for a in 0..=100 {
            for b in 0..=100 {
                for c in 0..=100 {
                    let beta = [a as f64 * 1e-2, b as f64 * 1e-2, c as f64 * 1e-2];
                    let v = eval(beta);
                    if v < grid_best {
                        grid_best = v;
                        coarse = beta;
                    }
                }
            }
        }
        for a in -10..=10 {
            for b in -10..=10 {
                for c in -10..=10 {
                    let beta = [
                        (coarse[0] + a as f64 * 1e-3).clamp(0.0, 1.0),
                        (coarse[1] + b as f64 * 1e-3).clamp(0.0, 1.0),
                        (coarse[2] + c as f64 * 1e-3).clamp(0.0, 1.0),
                    ];
                    grid_best = grid_best.min(eval(beta));
                }
            }
        }
        assert!(best <= grid_best + 1e-12, "{best} vs {grid_best}");
        assert!(grid_best - best <= 1e-5, "{best} vs {grid_best}");
    }

    #[test]
    fn alpha_zero_is_plain_lasso() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let x = standardized(25, 5, &mut rng);
            let o = random(25, 5, &mut rng);
            let cfg = SparseConfig {
                lambda: rng.random_range(0.0..0.3),
                alpha: 0.0,
                ..SparseConfig::default()
            };
            let r = similarity_matrix(&x, &cfg).unwrap();
            let sol = iilasso_diag(&x, &o, &r, &cfg).unwrap();
            let reference = plain_lasso_diag(&x, &o, cfg.lambda);
            for (a, b) in sol.beta.iter().zip(&reference) {
                assert!((a - b).abs() <= 1e-8);
            }
        }
    }

    #[test]
    fn diag_self_regression_stays_in_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            let base = random(40, 3, &mut rng);
            // Correlated columns so the coupling bites.
            let mix = random(3, 8, &mut rng);
            let x = standardize_columns(
                &linalg::matmul(&base, &mix).unwrap(),
                StandardizeMode::CenterAndScale,
            )
            .unwrap()
            .0;
            let cfg = SparseConfig::default();
            let r = similarity_matrix(&x, &cfg).unwrap();
            let sol = iilasso_diag(&x, &x, &r, &cfg).unwrap();
            assert!(sol.beta.iter().all(|&b| (-1e-9..=1.0 + 1e-9).contains(&b)));
            for w in sol.objective_trace.windows(2) {
                assert!(w[1] <= w[0] + 1e-10);
            }
        }
    }

    #[test]
    fn stop_rules() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = standardized(20, 5, &mut rng);
        let o = random(20, 5, &mut rng);
        let r = similarity_matrix(&x, &SparseConfig::default()).unwrap();
        let capped = SparseConfig {
            max_itr: 1,
            tol: 1e-300,
            ..SparseConfig::default()
        };
        let sol = iilasso_diag(&x, &o, &r, &capped).unwrap();
        assert_eq!(sol.sweeps_run, 1);
        assert!(matches!(
            sol.stop_reason,
            StopReason::MaxItr | StopReason::Converged
        ));
        let loose = SparseConfig {
            target_nnz: 5,
            ..SparseConfig::default()
        };
        let sol = iilasso_diag(&x, &o, &r, &loose).unwrap();
        assert_eq!(sol.stop_reason, StopReason::TargetNnz);
        assert_eq!(sol.sweeps_run, 0);
        assert_eq!(sol.beta, vec![1.0; 5]);
    }

    fn scaled_terms(n: usize, d2: usize, dn: usize, rng: &mut ChaCha8Rng) -> Vec<Matrix> {
        (0..dn)
            .map(|_| {
                let t = random(n, d2, rng);
                let s = (t.frobenius_norm_sq() / (n * d2) as f64).sqrt();
                t.map(|v| v / s).unwrap()
            })
            .collect()
    }

    fn stacked(t: &[Matrix]) -> Matrix {
        let cols: Vec<Vec<f64>> = t.iter().map(linalg::vectorize).collect();
        Matrix::from_fn(cols[0].len(), cols.len(), |i, j| cols[j][i]).unwrap()
    }

    #[test]
    fn residual_single_term_recovers_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let t = scaled_terms(10, 2, 1, &mut rng);
        let cfg = SparseConfig {
            lambda: 0.0,
            ..SparseConfig::default()
        };
        let sol = iilasso_residual(&t, &t[0], &SimilarityMatrix::zeros(1), &cfg).unwrap();
        assert!((sol.beta[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn residual_orthogonal_target_gives_zero() {
        // Terms live in the first column, the target in the second.
        let t: Vec<Matrix> = (0..3)
            .map(|k| {
                Matrix::from_fn(4, 2, |i, j| {
                    if j == 0 {
                        [
                            [1.0, 1.0, -1.0, -1.0],
                            [1.0, -1.0, 1.0, -1.0],
                            [1.0, -1.0, -1.0, 1.0],
                        ][k][i]
                            * 2f64.sqrt()
                    } else {
                        0.0
                    }
                })
                .unwrap()
            })
            .collect();
        let y = Matrix::from_fn(4, 2, |i, j| if j == 1 { i as f64 } else { 0.0 }).unwrap();
        let cfg = SparseConfig {
            lambda: 0.01,
            alpha: 0.0,
            ..SparseConfig::default()
        };
        let r = similarity_matrix(&stacked(&t), &cfg).unwrap();
        let sol = iilasso_residual(&t, &y, &r, &cfg).unwrap();
        assert_eq!(sol.beta, vec![0.0; 3]);
    }

    #[test]
    fn residual_lasso_satisfies_kkt() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (n, d2, dn) = (20, 2, 3);
        let t = scaled_terms(n, d2, dn, &mut rng);
        let truth = [0.7, 0.0, -0.4];
        let noise = random(n, d2, &mut rng);
        let y = Matrix::from_fn(n, d2, |i, j| {
            truth
                .iter()
                .zip(&t)
                .map(|(b, ti)| b * ti.get(i, j))
                .sum::<f64>()
                + 0.1 * noise.get(i, j)
        })
        .unwrap();
        let cfg = SparseConfig {
            lambda: 0.05,
            alpha: 0.0,
            tol: 1e-13,
            ..SparseConfig::default()
        };
        let sol = iilasso_residual(&t, &y, &SimilarityMatrix::zeros(dn), &cfg).unwrap();
        let m = (n * d2) as f64;
        let yv = linalg::vectorize(&y);
        let cols: Vec<Vec<f64>> = t.iter().map(linalg::vectorize).collect();
        let resid: Vec<f64> = (0..yv.len())
            .map(|k| yv[k] - (0..dn).map(|j| sol.beta[j] * cols[j][k]).sum::<f64>())
            .collect();
        for j in 0..dn {
            let g = linalg::dot(&resid, &cols[j]) / m;
            if sol.beta[j] == 0.0 {
                assert!(g.abs() <= cfg.lambda + 1e-6);
            } else {
                assert!((g - cfg.lambda * sol.beta[j].signum()).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn residual_rejects_bad_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut t = scaled_terms(5, 2, 2, &mut rng);
        let y = random(5, 2, &mut rng);
        let r = SimilarityMatrix::zeros(2);
        let cfg = SparseConfig::default();
        t[1] = random(5, 3, &mut rng);
        assert!(matches!(
            iilasso_residual(&t, &y, &r, &cfg),
            Err(SparseError::Shape(_))
        ));
        t[1] = random(5, 2, &mut rng).map(|v| v * 10.0).unwrap();
        assert!(matches!(
            iilasso_residual(&t, &y, &r, &cfg),
            Err(SparseError::NotStandardized { column: 1, .. })
        ));
    }

    #[test]
    fn refit_recovers_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a1 = random(30, 4, &mut rng);
        let w0 = random(4, 3, &mut rng);
        let o_new = linalg::matmul(&a1, &w0).unwrap();
        let (w, fell_back) = refit_w1(&a1, &o_new, &[1.0, 1.0, 1.0], 0.0).unwrap();
        assert!(!fell_back);
        assert!(w.sub(&w0).unwrap().max_abs() <= 1e-8);

        let (w, _) = refit_w1(&a1, &o_new, &[0.5, 0.0, 2.0], 0.0).unwrap();
        assert_eq!(w.column(1), vec![0.0; 4]);
        for i in 0..4 {
            assert!((w.get(i, 0) - 2.0 * w0.get(i, 0)).abs() <= 1e-8);
            assert!((w.get(i, 2) - 0.5 * w0.get(i, 2)).abs() <= 1e-8);
        }
    }

    #[test]
    fn refit_never_worsens_the_fit() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let fit = |a1: &Matrix, o: &Matrix, w: &Matrix, beta: &[f64]| {
            let pred = linalg::matmul(a1, &w.scale_columns(beta).unwrap()).unwrap();
            o.sub(&pred).unwrap().frobenius_norm_sq().sqrt()
        };
        for _ in 0..10 {
            let a1 = random(25, 5, &mut rng);
            let o = random(25, 4, &mut rng);
            let w_old = random(5, 4, &mut rng);
            let beta = [0.3, 1.2, 0.0, -0.7];
            let (w_new, _) = refit_w1(&a1, &o, &beta, 0.0).unwrap();
            assert!(fit(&a1, &o, &w_new, &beta) <= fit(&a1, &o, &w_old, &beta) + 1e-10);
        }
    }
}
