//! Layer insertion: grow a trained MLP by one hidden layer placed right after
//! layer `insert_after`, then sparsify the new layer's neurons.
//!
//! Notation follows the code: `L1` is layer `insert_after` with output
//! activations `a1` (N × D1) on the probe batch, `L2` is the layer after it
//! with pre-activations `o2` (N × D2). The child replaces `L2` by the new layer
//! `W1` (D1 × Dn, bias-free, activation `h`) followed by a refit `W2`
//! (Dn × D2) that keeps `L2`'s bias structure and activation.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use log::{debug, info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, LinalgError, Matrix, StandardizeMode};
use crate::network::{apply_activation, init_weights, Activation, Layer, Mlp, NetworkError};
use crate::sparse::{self, DiagSolver, ResidualSolver, SparseConfig, SparseError, StopReason};

/// Default cap on `Dn · N · D2` for the residual algorithm.
pub const DEFAULT_ALG3_BUDGET: usize = 1 << 27;

#[derive(Debug, Error)]
pub enum MorphError {
    #[error("invalid morph spec: {0}")]
    Spec(String),
    #[error("λ = {lambda} too large; child layer would be empty (try a smaller lambda)")]
    EmptyLayer { lambda: f64 },
    #[error(
        "residual design needs {values} values, above the budget of {budget}; set a row sample size or raise the budget"
    )]
    MemoryBudget { values: usize, budget: usize },
    #[error("cannot fold β into a {0} layer: activation is not positively homogeneous")]
    NotHomogeneous(Activation),
    #[error("cannot fold negative β_{index} = {value} through relu")]
    NegativeBeta { index: usize, value: f64 },
    #[error("layer index {index} out of range: {message}")]
    IndexOutOfRange { index: usize, message: String },
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Sparse(#[from] SparseError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

pub type Result<T> = std::result::Result<T, MorphError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Alg1,
    Alg2,
    Alg3,
    Baseline,
}

impl Algorithm {
    pub const ALL: [Algorithm; 4] = [
        Algorithm::Alg1,
        Algorithm::Alg2,
        Algorithm::Alg3,
        Algorithm::Baseline,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Alg1 => "alg1",
            Algorithm::Alg2 => "alg2",
            Algorithm::Alg3 => "alg3",
            Algorithm::Baseline => "baseline",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = MorphError;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name() == s.to_ascii_lowercase())
            .ok_or_else(|| {
                MorphError::Spec(format!(
                    "unknown algorithm {s:?} (expected alg1, alg2, alg3 or baseline)"
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MorphSpec {
    /// Index of `L1`; the new layer goes right after it.
    pub insert_after: usize,
    /// Width of the new layer before sparsification.
    pub width: usize,
    pub activation: Activation,
    pub algorithm: Algorithm,
    pub sparse: SparseConfig,
    pub seed: u64,
    /// Scale surviving `W1` columns by `β` before the `W2` refit (relu/identity only).
    pub fold_beta: bool,
    /// Number of probe rows sampled for the residual algorithm.
    pub alg3_row_sample: Option<usize>,
    pub alg3_budget: usize,
    /// Outer (β, W1) alternations for alg2.
    pub alg2_outer_itr: usize,
    /// Disable the alg2 W1 refit, leaving only repeated β solves.
    pub alg2_refit: bool,
    /// Ridge for every least-squares solve.
    pub ridge: f64,
    /// Use this `W1` instead of a seeded random one.
    pub initial_w1: Option<Matrix>,
}

impl MorphSpec {
    pub fn new(
        insert_after: usize,
        width: usize,
        activation: Activation,
        algorithm: Algorithm,
    ) -> Self {
        Self {
            insert_after,
            width,
            activation,
            algorithm,
            sparse: SparseConfig::default(),
            seed: 0,
            fold_beta: false,
            alg3_row_sample: None,
            alg3_budget: DEFAULT_ALG3_BUDGET,
            alg2_outer_itr: 50,
            alg2_refit: true,
            ridge: 0.0,
            initial_w1: None,
        }
    }

    pub fn validate(&self, mlp: &Mlp) -> Result<()> {
        if self.width == 0 {
            return Err(MorphError::Spec("width must be at least 1".into()));
        }
        if self.insert_after + 1 >= mlp.len() {
            return Err(MorphError::Spec(format!(
                "insert_after = {} must name a non-final layer of a {}-layer network",
                self.insert_after,
                mlp.len()
            )));
        }
        self.sparse.validate()?;
        if self.alg2_outer_itr == 0 {
            return Err(MorphError::Spec("alg2_outer_itr must be at least 1".into()));
        }
        if !(self.ridge >= 0.0) || !self.ridge.is_finite() {
            return Err(MorphError::Spec(format!(
                "ridge must be finite and non-negative, got {}",
                self.ridge
            )));
        }
        if self.alg3_row_sample == Some(0) {
            return Err(MorphError::Spec("alg3_row_sample must be positive".into()));
        }
        if self.fold_beta && !self.activation.is_positively_homogeneous() {
            return Err(MorphError::NotHomogeneous(self.activation));
        }
        if let Some(w) = &self.initial_w1 {
            let d1 = mlp.layers()[self.insert_after].d_out();
            if w.shape() != (d1, self.width) {
                return Err(MorphError::Spec(format!(
                    "initial_w1 is {:?}, expected ({d1}, {})",
                    w.shape(),
                    self.width
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MorphReport {
    pub algorithm: Algorithm,
    pub activation: Activation,
    pub n_redundant: usize,
    pub n_sparse: usize,
    /// `n_sparse / n_redundant`.
    pub compression_ratio: f64,
    /// Max abs entry of the child's `L2` pre-activation minus the parent's, on the probe.
    pub preservation_max: f64,
    pub preservation_rms: f64,
    /// `None` for the baseline, which does not sparsify.
    pub sparse_stop_reason: Option<StopReason>,
    /// Some least-squares solve needed the ridge fallback.
    pub ridge_fallback: bool,
    /// Coordinate-descent sweeps, summed over alg2's outer iterations.
    pub sweeps: usize,
    /// Full-width `β`; zeros mark dropped neurons.
    pub beta: Vec<f64>,
    /// alg2 only: the β-problem objective after each half step.
    pub alternation_trace: Vec<f64>,
    pub wall_time: f64,
}

impl MorphReport {
    /// Equality on everything except `wall_time`.
    pub fn same_result(&self, other: &MorphReport) -> bool {
        let mut a = self.clone();
        a.wall_time = other.wall_time;
        a == *other
    }
}

/// The parent quantities every algorithm starts from.
struct Taps {
    a1: Matrix,
    o2: Matrix,
    l2: Layer,
    ridge: f64,
}

fn taps(mlp: &Mlp, spec: &MorphSpec, probe: &Matrix) -> Result<Taps> {
    spec.validate(mlp)?;
    let k = spec.insert_after;
    let mut out = mlp.forward(probe)?;
    let d1 = mlp.layers()[k].d_out();
    let needed = spec.width.max(d1) + 1;
    let mut ridge = spec.ridge;
    if probe.rows() < needed {
        if ridge == 0.0 {
            ridge = 1e-6;
        }
        warn!(
            "probe has {} rows but the regressions have up to {} unknowns; using ridge {ridge}",
            probe.rows(),
            needed
        );
    }
    Ok(Taps {
        o2: out.pre_activations.swap_remove(k + 1),
        a1: out.activations.swap_remove(k),
        l2: mlp.layers()[k + 1].clone(),
        ridge,
    })
}

fn initial_w1(spec: &MorphSpec, d1: usize) -> Matrix {
    match &spec.initial_w1 {
        Some(w) => w.clone(),
        None => init_weights(d1, spec.width, spec.activation, spec.seed),
    }
}

/// Least-squares `W2` (and bias, when `with_bias`) of `o2` on `a_new`.
///
/// Neurons whose activations carry no information on the probe (constant
/// with a bias, all zero without) make the system singular; they get zero
/// rows instead, which leaves the fitted outputs unchanged.
fn fit_w2(
    a_new: &Matrix,
    o2: &Matrix,
    with_bias: bool,
    ridge: f64,
) -> Result<(Matrix, Option<Vec<f64>>, bool)> {
    let informative: Vec<usize> = (0..a_new.cols())
        .filter(|&j| {
            let c = a_new.column(j);
            if with_bias {
                c.iter().any(|&v| v != c[0])
            } else {
                c.iter().any(|&v| v != 0.0)
            }
        })
        .collect();
    let design = a_new.select_columns(&informative);
    let p = informative.len();
    let (weights, fell_back) = if with_bias {
        let ones = Matrix::from_vec(a_new.rows(), 1, vec![1.0; a_new.rows()])?;
        let fit = linalg::least_squares_with_fallback(&design.hstack(&ones)?, o2, ridge)?;
        (fit.weights, fit.fell_back)
    } else if p > 0 {
        let fit = linalg::least_squares_with_fallback(&design, o2, ridge)?;
        (fit.weights, fit.fell_back)
    } else {
        (Matrix::zeros(0, o2.cols()), false)
    };
    let d2 = o2.cols();
    let mut w2 = vec![0.0; a_new.cols() * d2];
    for (k, &j) in informative.iter().enumerate() {
        w2[j * d2..(j + 1) * d2].copy_from_slice(weights.row(k));
    }
    let bias = with_bias.then(|| weights.row(p).to_vec());
    Ok((Matrix::from_vec(a_new.cols(), d2, w2)?, bias, fell_back))
}

fn assemble(parent: &Mlp, k: usize, w1: Matrix, activation: Activation, l2: Layer) -> Result<Mlp> {
    let mut layers: Vec<Layer> = parent.layers()[..=k].to_vec();
    layers.push(Layer::new(w1, None, activation)?);
    layers.push(l2);
    layers.extend_from_slice(&parent.layers()[k + 2..]);
    Ok(Mlp::new(layers)?)
}

fn kept(beta: &[f64]) -> Vec<usize> {
    beta.iter()
        .enumerate()
        .filter_map(|(j, &b)| (b != 0.0).then_some(j))
        .collect()
}

/// Drops zero-β columns of `w1` (optionally folding β in), refits `W2` and
/// builds the child and its report.
fn finish_column_sparse(
    parent: &Mlp,
    spec: &MorphSpec,
    taps: &Taps,
    w1: &Matrix,
    beta: Vec<f64>,
    mut ridge_fallback: bool,
) -> Result<(Mlp, Vec<f64>, bool)> {
    let keep = kept(&beta);
    if keep.is_empty() {
        return Err(MorphError::EmptyLayer {
            lambda: spec.sparse.lambda,
        });
    }
    let mut w1_kept = w1.select_columns(&keep);
    if spec.fold_beta {
        let b: Vec<f64> = keep.iter().map(|&j| beta[j]).collect();
        w1_kept = fold_beta(&w1_kept, &b, spec.activation)?;
    }
    let a_new = apply_activation(spec.activation, &linalg::matmul(&taps.a1, &w1_kept)?);
    let (w2, b2, fell_back) = fit_w2(&a_new, &taps.o2, taps.l2.bias().is_some(), taps.ridge)?;
    ridge_fallback |= fell_back;
    let l2 = Layer::new(w2, b2, taps.l2.activation())?;
    let child = assemble(parent, spec.insert_after, w1_kept, spec.activation, l2)?;
    Ok((child, beta, ridge_fallback))
}

#[allow(clippy::too_many_arguments)]
fn report(
    parent: &Mlp,
    child: &Mlp,
    spec: &MorphSpec,
    probe: &Matrix,
    beta: Vec<f64>,
    stop: Option<StopReason>,
    sweeps: usize,
    ridge_fallback: bool,
    alternation_trace: Vec<f64>,
    started: Instant,
) -> Result<MorphReport> {
    let n_sparse = child.layers()[spec.insert_after + 1].d_out();
    let (preservation_max, preservation_rms) =
        preservation_error(parent, child, probe, spec.insert_after)?;
    let report = MorphReport {
        algorithm: spec.algorithm,
        activation: spec.activation,
        n_redundant: spec.width,
        n_sparse,
        compression_ratio: n_sparse as f64 / spec.width as f64,
        preservation_max,
        preservation_rms,
        sparse_stop_reason: stop,
        ridge_fallback,
        sweeps,
        beta,
        alternation_trace,
        wall_time: started.elapsed().as_secs_f64(),
    };
    info!(
        "{}: {} -> {} neurons, preservation max {:.3e} rms {:.3e}",
        report.algorithm,
        report.n_redundant,
        report.n_sparse,
        report.preservation_max,
        report.preservation_rms
    );
    Ok(report)
}

/// Standardized `a1 · w1` together with the indices of its non-constant columns.
fn standardized_candidates(a1: &Matrix, w1: &Matrix) -> Result<(Matrix, Vec<usize>)> {
    let (x, info) =
        linalg::standardize_columns(&linalg::matmul(a1, w1)?, StandardizeMode::CenterAndScale)?;
    let live: Vec<usize> = (0..x.cols()).filter(|&j| !info.constant[j]).collect();
    Ok((x, live))
}

/// One β solve of the per-column problem restricted to the live columns.
/// Constant candidates carry no signal; they get `β = 0`.
fn solve_diag(
    x: &Matrix,
    o: &Matrix,
    live: &[usize],
    cfg: &SparseConfig,
    warm: &[f64],
) -> Result<(Vec<f64>, sparse::SparseSolution)> {
    let x_live = x.select_columns(live);
    let o_live = o.select_columns(live);
    let r = sparse::similarity_matrix(&x_live, cfg)?;
    let warm_live: Vec<f64> = live.iter().map(|&j| warm[j]).collect();
    let sol = DiagSolver::new(&x_live, &o_live, &r, cfg, Some(warm_live))?.run()?;
    let mut beta = vec![0.0; x.cols()];
    for (&j, &b) in live.iter().zip(&sol.beta) {
        beta[j] = b;
    }
    Ok((beta, sol))
}

/// Per-column objective over all columns; dead columns contribute their
/// unexplained target energy.
fn diag_loss(
    x: &Matrix,
    o: &Matrix,
    live: &[usize],
    beta: &[f64],
    cfg: &SparseConfig,
) -> Result<f64> {
    let x_live = x.select_columns(live);
    let o_live = o.select_columns(live);
    let r = sparse::similarity_matrix(&x_live, cfg)?;
    let warm: Vec<f64> = live.iter().map(|&j| beta[j]).collect();
    let obj = DiagSolver::new(&x_live, &o_live, &r, cfg, Some(warm))?.objective();
    let n = x.rows() as f64;
    let dead: f64 = (0..x.cols())
        .filter(|j| !live.contains(j))
        .map(|j| {
            let c = o.column(j);
            0.5 * linalg::dot(&c, &c) / n
        })
        .sum();
    Ok(obj + dead)
}

/// Sparsify `W1` with one β solve, then refit `W2`.
pub fn morph_alg1(mlp: &Mlp, spec: &MorphSpec, probe: &Matrix) -> Result<(Mlp, MorphReport)> {
    let started = Instant::now();
    let taps = taps(mlp, spec, probe)?;
    let w1 = initial_w1(spec, taps.a1.cols());
    let (x, live) = standardized_candidates(&taps.a1, &w1)?;
    if live.is_empty() {
        return Err(MorphError::EmptyLayer {
            lambda: spec.sparse.lambda,
        });
    }
    let (beta, sol) = solve_diag(&x, &x, &live, &spec.sparse, &vec![1.0; spec.width])?;
    debug!(
        "alg1 β solve: {} sweeps, {}",
        sol.sweeps_run, sol.stop_reason
    );
    let (child, beta, fell_back) = finish_column_sparse(mlp, spec, &taps, &w1, beta, false)?;
    let report = report(
        mlp,
        &child,
        spec,
        probe,
        beta,
        Some(sol.stop_reason),
        sol.sweeps_run,
        fell_back,
        Vec::new(),
        started,
    )?;
    Ok((child, report))
}

/// Alternate β solves with least-squares refits of `W1`, then refit `W2`.
///
/// The β target stays the standardized `a1 · W1_init`; each refit solves
/// `W1_j = lstsq(a1, a1 · W1_init_j) / β_j`.
pub fn morph_alg2(mlp: &Mlp, spec: &MorphSpec, probe: &Matrix) -> Result<(Mlp, MorphReport)> {
    let started = Instant::now();
    let taps = taps(mlp, spec, probe)?;
    let w_init = initial_w1(spec, taps.a1.cols());
    let o_raw = linalg::matmul(&taps.a1, &w_init)?;
    let (target, _) = linalg::standardize_columns(&o_raw, StandardizeMode::CenterAndScale)?;
    let cfg = &spec.sparse;

    let mut w1 = w_init;
    let mut beta = vec![1.0; spec.width];
    let mut trace = Vec::new();
    let mut sweeps = 0;
    let mut fell_back = false;
    let mut delta = f64::INFINITY;
    let mut outer = 0;
    let stop = loop {
        let nnz = beta.iter().filter(|b| **b != 0.0).count();
        if delta < cfg.tol {
            break StopReason::Converged;
        }
        if nnz <= cfg.target_nnz {
            break StopReason::TargetNnz;
        }
        if outer >= spec.alg2_outer_itr {
            break StopReason::MaxItr;
        }
        let (x, live) = standardized_candidates(&taps.a1, &w1)?;
        if live.is_empty() {
            beta = vec![0.0; spec.width];
            break StopReason::TargetNnz;
        }
        let (new_beta, sol) = solve_diag(&x, &target, &live, cfg, &beta)?;
        sweeps += sol.sweeps_run;
        delta = beta
            .iter()
            .zip(&new_beta)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        beta = new_beta;
        trace.push(diag_loss(&x, &target, &live, &beta, cfg)?);
        if spec.alg2_refit {
            let (w, fb) = sparse::refit_w1(&taps.a1, &o_raw, &beta, taps.ridge)?;
            fell_back |= fb;
            w1 = w;
            let (x, live) = standardized_candidates(&taps.a1, &w1)?;
            if !live.is_empty() {
                trace.push(diag_loss(&x, &target, &live, &beta, cfg)?);
            }
        }
        outer += 1;
        debug!("alg2 outer {outer}: Δβ = {delta:.3e}");
    };
    let (child, beta, fell_back) = finish_column_sparse(mlp, spec, &taps, &w1, beta, fell_back)?;
    let report = report(
        mlp,
        &child,
        spec,
        probe,
        beta,
        Some(stop),
        sweeps,
        fell_back,
        trace,
        started,
    )?;
    Ok((child, report))
}

/// Sorted row indices of a seeded uniform sample of `k` out of `n`; all rows
/// when `k >= n`.
pub fn sample_rows(n: usize, k: usize, seed: u64) -> Vec<usize> {
    if k >= n {
        return (0..n).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, n, k).into_vec();
    idx.sort_unstable();
    idx
}

/// `T_i = a_new[:, i] · w2[i, :]` for every neuron `i`.
pub fn outer_product_terms(a_new: &Matrix, w2: &Matrix) -> Result<Vec<Matrix>> {
    if a_new.cols() != w2.rows() {
        return Err(LinalgError::DimensionMismatch {
            op: "outer_product_terms",
            left: a_new.shape(),
            right: w2.shape(),
        }
        .into());
    }
    (0..a_new.cols())
        .map(|i| {
            let a = a_new.column(i);
            let w = w2.row(i);
            Ok(Matrix::from_fn(a_new.rows(), w2.cols(), |n, d| {
                a[n] * w[d]
            })?)
        })
        .collect()
}

/// Jointly sparsify `W1` columns and `W2` rows through the residual
/// reconstruction of `o2`.
///
/// With a bias on `L2`, the target and every term are centered per output
/// column and the intercept is recovered afterwards. Terms are scaled to
/// `‖vec(t_i)‖² = N·D2` by `s_i`, so a surviving `W2` row is scaled by
/// `β_i / s_i`.
pub fn morph_alg3(mlp: &Mlp, spec: &MorphSpec, probe: &Matrix) -> Result<(Mlp, MorphReport)> {
    let started = Instant::now();
    let taps = taps(mlp, spec, probe)?;
    let d2 = taps.o2.cols();
    let rows = match spec.alg3_row_sample {
        None => {
            let values = spec.width * probe.rows() * d2;
            if values > spec.alg3_budget {
                return Err(MorphError::MemoryBudget {
                    values,
                    budget: spec.alg3_budget,
                });
            }
            None
        }
        Some(k) if k >= probe.rows() => None,
        Some(k) => Some(sample_rows(probe.rows(), k, spec.seed)),
    };
    let w1 = initial_w1(spec, taps.a1.cols());
    let a_full = apply_activation(spec.activation, &linalg::matmul(&taps.a1, &w1)?);
    let (a_new, o2) = match &rows {
        None => (a_full, taps.o2.clone()),
        Some(idx) => (a_full.select_rows(idx), taps.o2.select_rows(idx)),
    };
    let n = a_new.rows();
    let m = n * d2;
    let with_bias = taps.l2.bias().is_some();
    let (w2, _, fell_back) = fit_w2(&a_new, &o2, with_bias, taps.ridge)?;

    let a_means = if with_bias {
        a_new.column_means()
    } else {
        vec![0.0; spec.width]
    };
    let o_means = if with_bias {
        o2.column_means()
    } else {
        vec![0.0; d2]
    };
    let mut target = Vec::with_capacity(m);
    for d in 0..d2 {
        target.extend((0..n).map(|r| o2.get(r, d) - o_means[d]));
    }
    let mut columns = Vec::new();
    let mut scales = Vec::new();
    let mut live = Vec::new();
    for i in 0..spec.width {
        let a: Vec<f64> = a_new.column(i).iter().map(|v| v - a_means[i]).collect();
        let w = w2.row(i);
        let norm_sq = linalg::dot(&a, &a) * linalg::dot(w, w);
        if !(norm_sq > 1e-24 * m as f64) {
            continue;
        }
        let s = (norm_sq / m as f64).sqrt();
        let mut col = Vec::with_capacity(m);
        for &wd in w {
            col.extend(a.iter().map(|v| v * wd / s));
        }
        columns.push(col);
        scales.push(s);
        live.push(i);
    }
    if live.is_empty() {
        return Err(MorphError::EmptyLayer {
            lambda: spec.sparse.lambda,
        });
    }
    let r = sparse::similarity_from_columns(&columns, &spec.sparse)?;
    let sol = ResidualSolver::from_stacked(columns, target, &r, &spec.sparse, None)?.run()?;
    debug!(
        "alg3 β solve: {} sweeps, {}",
        sol.sweeps_run, sol.stop_reason
    );

    let mut beta = vec![0.0; spec.width];
    let mut gamma = vec![0.0; spec.width];
    for ((&i, &b), &s) in live.iter().zip(&sol.beta).zip(&scales) {
        beta[i] = b;
        gamma[i] = b / s;
    }
    let keep = kept(&beta);
    if keep.is_empty() {
        return Err(MorphError::EmptyLayer {
            lambda: spec.sparse.lambda,
        });
    }
    let g: Vec<f64> = keep.iter().map(|&i| gamma[i]).collect();
    let w2_kept = w2.select_rows(&keep).scale_rows(&g)?;
    let bias = with_bias.then(|| {
        (0..d2)
            .map(|d| {
                o_means[d]
                    - keep
                        .iter()
                        .map(|&i| gamma[i] * a_means[i] * w2.get(i, d))
                        .sum::<f64>()
            })
            .collect()
    });
    let l2 = Layer::new(w2_kept, bias, taps.l2.activation())?;
    let child = assemble(
        mlp,
        spec.insert_after,
        w1.select_columns(&keep),
        spec.activation,
        l2,
    )?;
    let report = report(
        mlp,
        &child,
        spec,
        probe,
        beta,
        Some(sol.stop_reason),
        sol.sweeps_run,
        fell_back,
        Vec::new(),
        started,
    )?;
    Ok((child, report))
}

/// Insert the full-width layer and refit `W2`, without sparsification.
pub fn morph_baseline(mlp: &Mlp, spec: &MorphSpec, probe: &Matrix) -> Result<(Mlp, MorphReport)> {
    let started = Instant::now();
    let taps = taps(mlp, spec, probe)?;
    let w1 = initial_w1(spec, taps.a1.cols());
    let a_new = apply_activation(spec.activation, &linalg::matmul(&taps.a1, &w1)?);
    let (w2, b2, fell_back) = fit_w2(&a_new, &taps.o2, taps.l2.bias().is_some(), taps.ridge)?;
    let l2 = Layer::new(w2, b2, taps.l2.activation())?;
    let child = assemble(mlp, spec.insert_after, w1, spec.activation, l2)?;
    let report = report(
        mlp,
        &child,
        spec,
        probe,
        vec![1.0; spec.width],
        None,
        0,
        fell_back,
        Vec::new(),
        started,
    )?;
    Ok((child, report))
}

/// Dispatches on `spec.algorithm`.
pub fn morph(mlp: &Mlp, spec: &MorphSpec, probe: &Matrix) -> Result<(Mlp, MorphReport)> {
    match spec.algorithm {
        Algorithm::Alg1 => morph_alg1(mlp, spec, probe),
        Algorithm::Alg2 => morph_alg2(mlp, spec, probe),
        Algorithm::Alg3 => morph_alg3(mlp, spec, probe),
        Algorithm::Baseline => morph_baseline(mlp, spec, probe),
    }
}

/// Max-abs and RMS difference between the child's and the parent's `L2`
/// pre-activations on `probe`. `at_layer` is the parent's `L1` index; a child
/// with the same depth as the parent is compared layer for layer.
pub fn preservation_error(
    parent: &Mlp,
    child: &Mlp,
    probe: &Matrix,
    at_layer: usize,
) -> Result<(f64, f64)> {
    if at_layer + 1 >= parent.len() {
        return Err(MorphError::IndexOutOfRange {
            index: at_layer,
            message: format!("parent has {} layers and no layer after it", parent.len()),
        });
    }
    let extra = match child.len().checked_sub(parent.len()) {
        Some(e @ (0 | 1)) => e,
        _ => {
            return Err(MorphError::IndexOutOfRange {
                index: at_layer,
                message: format!("child has {} layers, parent {}", child.len(), parent.len()),
            })
        }
    };
    let p = parent
        .forward(probe)?
        .pre_activations
        .swap_remove(at_layer + 1);
    let c = child
        .forward(probe)?
        .pre_activations
        .swap_remove(at_layer + 1 + extra);
    let diff = c.sub(&p)?;
    let rms = (diff.frobenius_norm_sq() / (diff.rows() * diff.cols()).max(1) as f64).sqrt();
    Ok((diff.max_abs(), rms))
}

/// `w1` with column `j` scaled by `β_j`, which equals scaling the layer's
/// activations when `h` is positively homogeneous.
pub fn fold_beta(w1: &Matrix, beta: &[f64], activation: Activation) -> Result<Matrix> {
    if !activation.is_positively_homogeneous() {
        return Err(MorphError::NotHomogeneous(activation));
    }
    if activation == Activation::Relu {
        if let Some((index, &value)) = beta.iter().enumerate().find(|(_, b)| **b < 0.0) {
            return Err(MorphError::NegativeBeta { index, value });
        }
    }
    Ok(w1.scale_columns(beta)?)
}
