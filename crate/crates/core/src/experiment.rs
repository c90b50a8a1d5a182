//! End-to-end desk experiment: train a parent, morph it with several
//! algorithms, and fine-tune each child.

use log::info;

use crate::io::{Dataset, ReportRow};
use crate::linalg::Matrix;
use crate::morph::{self, sample_rows, Algorithm, MorphError, MorphReport, MorphSpec};
use crate::network::{
    evaluate, train_sgd, Activation, EpochRecord, Mlp, NetworkError, TrainConfig,
};
use crate::sparse::SparseConfig;

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error("{algorithm}: {source}")]
    Morph {
        algorithm: Algorithm,
        #[source]
        source: MorphError,
    },
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

#[derive(Debug, Clone, PartialEq)]
pub struct DeskConfig {
    pub arch: Vec<usize>,
    pub hidden: Activation,
    pub train: TrainConfig,
    pub finetune: TrainConfig,
    pub insert_after: usize,
    pub width: usize,
    pub activation: Activation,
    pub sparse: SparseConfig,
    pub probe_size: usize,
    pub alg3_row_sample: Option<usize>,
    pub fold_beta: bool,
    pub algorithms: Vec<Algorithm>,
    pub seed: u64,
}

impl Default for DeskConfig {
    fn default() -> Self {
        Self {
            arch: vec![784, 64, 10],
            hidden: Activation::Relu,
            train: TrainConfig {
                epochs: 10,
                ..TrainConfig::default()
            },
            finetune: TrainConfig::default(),
            insert_after: 0,
            width: 100,
            activation: Activation::Relu,
            sparse: SparseConfig::default(),
            probe_size: 4096,
            alg3_row_sample: None,
            fold_beta: false,
            algorithms: Algorithm::ALL.to_vec(),
            seed: 1,
        }
    }
}

impl DeskConfig {
    pub fn morph_spec(&self, algorithm: Algorithm) -> MorphSpec {
        let mut spec = MorphSpec::new(self.insert_after, self.width, self.activation, algorithm);
        spec.sparse = self.sparse;
        spec.seed = self.seed;
        spec.fold_beta = self.fold_beta;
        spec.alg3_row_sample = self.alg3_row_sample;
        spec
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlgorithmRun {
    pub report: MorphReport,
    pub child: Mlp,
    pub finetuned: Mlp,
    pub finetune_history: Vec<EpochRecord>,
    pub acc_post_morph: f64,
    pub acc_after_finetune: f64,
}

impl AlgorithmRun {
    pub fn report_row(&self, run_id: impl Into<String>, acc_parent: f64) -> ReportRow {
        let mut row = ReportRow::from_report(run_id, &self.report);
        row.acc_parent = Some(acc_parent);
        row.acc_post_morph = Some(self.acc_post_morph);
        row.acc_after_finetune = Some(self.acc_after_finetune);
        row
    }
}

/// Rows of the training set used as the probe batch.
pub fn probe_batch(train: &Dataset, size: usize, seed: u64) -> Matrix {
    train
        .features()
        .select_rows(&sample_rows(train.len(), size, seed))
}

pub fn train_parent(train: &Dataset, cfg: &DeskConfig) -> Result<(Mlp, Vec<EpochRecord>)> {
    let init = Mlp::random(&cfg.arch, cfg.hidden, cfg.seed)?;
    Ok(train_sgd(&init, train, &cfg.train)?)
}

/// Morphs `parent` with one algorithm, then fine-tunes the child.
pub fn run_algorithm(
    parent: &Mlp,
    probe: &Matrix,
    train: &Dataset,
    test: &Dataset,
    cfg: &DeskConfig,
    algorithm: Algorithm,
) -> Result<AlgorithmRun> {
    let spec = cfg.morph_spec(algorithm);
    let (child, report) = morph::morph(parent, &spec, probe)
        .map_err(|source| ExperimentError::Morph { algorithm, source })?;
    let (_, acc_post_morph) = evaluate(&child, test)?;
    let (finetuned, finetune_history) = train_sgd(&child, train, &cfg.finetune)?;
    let (_, acc_after_finetune) = evaluate(&finetuned, test)?;
    info!(
        "{algorithm}: {} -> {} neurons, test acc {:.4} after morph, {:.4} after fine-tune",
        report.n_redundant, report.n_sparse, acc_post_morph, acc_after_finetune
    );
    Ok(AlgorithmRun {
        report,
        child,
        finetuned,
        finetune_history,
        acc_post_morph,
        acc_after_finetune,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeskOutcome {
    pub parent: Mlp,
    pub parent_history: Vec<EpochRecord>,
    pub acc_parent: f64,
    pub runs: Vec<AlgorithmRun>,
}

impl DeskOutcome {
    pub fn run(&self, algorithm: Algorithm) -> Option<&AlgorithmRun> {
        self.runs.iter().find(|r| r.report.algorithm == algorithm)
    }

    pub fn report_rows(&self, run_prefix: &str) -> Vec<ReportRow> {
        self.runs
            .iter()
            .map(|r| {
                r.report_row(
                    format!("{run_prefix}-{}", r.report.algorithm),
                    self.acc_parent,
                )
            })
            .collect()
    }
}

/// Trains a parent (unless one is given) and runs every configured algorithm.
pub fn run_desk(
    train: &Dataset,
    test: &Dataset,
    cfg: &DeskConfig,
    parent: Option<Mlp>,
) -> Result<DeskOutcome> {
    let (parent, parent_history) = match parent {
        Some(p) => (p, Vec::new()),
        None => train_parent(train, cfg)?,
    };
    let (_, acc_parent) = evaluate(&parent, test)?;
    info!("parent test accuracy {acc_parent:.4}");
    let probe = probe_batch(train, cfg.probe_size, cfg.seed);
    let runs = cfg
        .algorithms
        .iter()
        .map(|&alg| run_algorithm(&parent, &probe, train, test, cfg, alg))
        .collect::<Result<Vec<_>>>()?;
    Ok(DeskOutcome {
        parent,
        parent_history,
        acc_parent,
        runs,
    })
}
