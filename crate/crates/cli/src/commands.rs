use std::fmt;
use std::path::{Path, PathBuf};

use layermorph::experiment::{self, DeskConfig, ExperimentError};
use layermorph::io::{
    self, append_report_csv, write_history_csv, write_report_csv, IoError, ModelFile, ReportRow,
};
use layermorph::morph::{self, MorphError, MorphSpec};
use layermorph::network::{evaluate, train_sgd, NetworkError};
use layermorph::sparse::SparseConfig;
use layermorph::{verify, Dataset, Mlp, TrainConfig};
use log::info;
use serde_json::json;

use crate::args::*;

/// Exit status and message of a failed command.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub const USER: u8 = 1;
    pub const INTERNAL: u8 = 2;

    pub fn user(message: impl Into<String>) -> Self {
        Self {
            code: Self::USER,
            message: message.into(),
        }
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self {
            code: Self::INTERNAL,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        match e {
            IoError::EmptyReport => Self::internal(e.to_string()),
            _ => Self::user(e.to_string()),
        }
    }
}

impl From<NetworkError> for CliError {
    fn from(e: NetworkError) -> Self {
        match e {
            NetworkError::Chain { .. }
            | NetworkError::LabelRange { .. }
            | NetworkError::EmptyDataset
            | NetworkError::Diverged { .. }
            | NetworkError::BadConfig(_)
            | NetworkError::UnknownActivation(_) => Self::user(e.to_string()),
            _ => Self::internal(e.to_string()),
        }
    }
}

impl From<MorphError> for CliError {
    fn from(e: MorphError) -> Self {
        match e {
            MorphError::Network(inner) => inner.into(),
            MorphError::Sparse(_) | MorphError::Linalg(_) => Self::internal(e.to_string()),
            _ => Self::user(e.to_string()),
        }
    }
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Network(inner) => inner.into(),
            ExperimentError::Morph { algorithm, source } => {
                let mut err = CliError::from(source);
                err.message = format!("{algorithm}: {}", err.message);
                err
            }
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

/// Where command outputs go: relative paths land under `--out-dir`.
pub struct Context {
    pub out_dir: PathBuf,
}

impl Context {
    pub fn output(&self, path: &Path) -> Result<PathBuf> {
        let full = if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.out_dir.join(path)
        };
        if let Some(parent) = full.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)
                .map_err(|e| CliError::user(format!("cannot create {}: {e}", parent.display())))?;
        }
        Ok(full)
    }

    /// Inputs are taken as given, falling back to the output root.
    pub fn input(&self, path: &Path) -> PathBuf {
        if path.exists() || path.is_absolute() {
            path.to_path_buf()
        } else {
            self.out_dir.join(path)
        }
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn load_data(args: &DataArgs) -> Result<(Dataset, Dataset)> {
    match args.data {
        DataSource::Mnist => io::read_mnist_dir(&args.data_dir).map_err(|e| {
            CliError::user(format!(
                "{e}\nMNIST not found under {}; run scripts/fetch_mnist.sh, set MNIST_DIR, or pass --data synth",
                args.data_dir.display()
            ))
        }),
        DataSource::Synth => {
            if args.synth_n == 0 || args.synth_test_n == 0 || args.synth_dim == 0 || args.synth_classes == 0 {
                return Err(CliError::user("synthetic data sizes must all be positive"));
            }
            let train = io::synth_dataset(args.data_seed, args.synth_n, args.synth_dim, args.synth_classes)?;
            let test = io::synth_dataset(
                args.data_seed.wrapping_add(1),
                args.synth_test_n,
                args.synth_dim,
                args.synth_classes,
            )?;
            Ok((train, test))
        }
    }
}

fn check_fits(mlp: &Mlp, data: &Dataset) -> Result<()> {
    if mlp.input_dim() != data.features().cols() {
        return Err(CliError::user(format!(
            "model takes {} inputs but the data has {} features",
            mlp.input_dim(),
            data.features().cols()
        )));
    }
    if mlp.output_dim() < data.num_classes() {
        return Err(CliError::user(format!(
            "model has {} outputs but the data has {} classes",
            mlp.output_dim(),
            data.num_classes()
        )));
    }
    Ok(())
}

fn train_config(sgd: &SgdArgs) -> Result<TrainConfig> {
    let cfg = TrainConfig {
        learning_rate: sgd.lr,
        momentum: sgd.momentum,
        weight_decay: sgd.weight_decay,
        epochs: sgd.epochs,
        batch_size: sgd.batch_size,
        seed: sgd.seed,
    };
    cfg.validate().map_err(|e| CliError::user(e.to_string()))?;
    Ok(cfg)
}

fn sparse_config(args: &SparseArgs) -> Result<SparseConfig> {
    let cfg = SparseConfig {
        lambda: args.lambda,
        alpha: args.alpha,
        max_itr: args.max_itr,
        target_nnz: args.target_nnz,
        tol: args.tol,
        ..SparseConfig::default()
    };
    cfg.validate().map_err(|e| CliError::user(e.to_string()))?;
    if args.probe_size == 0 {
        return Err(CliError::user("--probe-size must be positive"));
    }
    Ok(cfg)
}

/// Converts an `--at` insertion point into the index of the layer before it.
fn insert_after(at: usize, mlp: &Mlp) -> Result<usize> {
    if at == 0 || at >= mlp.len() {
        return Err(CliError::user(format!(
            "--at {at} is not an interior position of a {}-layer network; valid values are 1..={}",
            mlp.len(),
            mlp.len().saturating_sub(1)
        )));
    }
    Ok(at - 1)
}

fn train_json(cfg: &TrainConfig) -> serde_json::Value {
    serde_json::to_value(cfg).unwrap_or_default()
}

pub fn train(ctx: &Context, args: &TrainArgs) -> Result<()> {
    let cfg = train_config(&args.sgd)?;
    let (train, test) = load_data(&args.data)?;
    let init = Mlp::random(&args.arch.0, args.act, args.sgd.seed)?;
    check_fits(&init, &train)?;
    let (mlp, history) = train_sgd(&init, &train, &cfg)?;
    let (loss, acc) = evaluate(&mlp, &test)?;
    let out = ctx.output(&args.out)?;
    ModelFile::from_mlp(&mlp)
        .with_metadata("seed", args.sgd.seed)
        .with_metadata("train", train_json(&cfg))
        .with_metadata("test_accuracy", acc)
        .write(&out)?;
    let history_path = ctx.output(
        &args
            .history
            .clone()
            .unwrap_or_else(|| with_suffix(&args.out, ".history.csv")),
    )?;
    write_history_csv(&history, &history_path, false)?;
    println!(
        "trained {:?}: test loss {loss:.5}, accuracy {acc:.4}",
        mlp.widths()
    );
    println!("wrote {} and {}", out.display(), history_path.display());
    Ok(())
}

pub fn morph(ctx: &Context, args: &MorphArgs) -> Result<()> {
    let sparse = sparse_config(&args.sparse)?;
    let model_path = ctx.input(&args.model);
    let parent_file = ModelFile::read(&model_path)?;
    let parent = parent_file.to_mlp(&model_path)?;
    let (train, test) = load_data(&args.data)?;
    check_fits(&parent, &train)?;

    let mut spec = MorphSpec::new(
        insert_after(args.at, &parent)?,
        args.width,
        args.act,
        args.alg,
    );
    spec.sparse = sparse;
    spec.seed = args.seed;
    spec.fold_beta = args.sparse.fold_beta;
    spec.alg3_row_sample = args.sparse.row_sample;
    spec.alg3_budget = args.sparse.alg3_budget;
    spec.alg2_outer_itr = args.sparse.outer_itr;
    spec.ridge = args.sparse.ridge;
    let probe = experiment::probe_batch(&train, args.sparse.probe_size, args.seed);
    let (child, report) = morph::morph(&parent, &spec, &probe)?;

    let (_, acc_parent) = evaluate(&parent, &test)?;
    let (_, acc_child) = evaluate(&child, &test)?;
    let out = ctx.output(&args.out)?;
    let mut file = ModelFile::from_mlp(&child);
    file.metadata = parent_file.metadata.clone();
    file.metadata.insert(
        "morph".into(),
        json!({
            "parent": model_path.display().to_string(),
            "algorithm": args.alg.to_string(),
            "at": args.at,
            "width": args.width,
            "activation": args.act.to_string(),
            "lambda": args.sparse.lambda,
            "alpha": args.sparse.alpha,
            "seed": args.seed,
            "n_sparse": report.n_sparse,
        }),
    );
    file.write(&out)?;

    let run_id = args
        .run_id
        .clone()
        .unwrap_or_else(|| format!("{}-seed{}", args.alg, args.seed));
    let mut row = ReportRow::from_report(run_id, &report);
    row.acc_parent = Some(acc_parent);
    row.acc_post_morph = Some(acc_child);
    let report_path = ctx.output(&args.report)?;
    append_report_csv(&[row], &report_path)?;

    println!(
        "{}: {} -> {} neurons (compression {:.3}), preservation max {:.3e} rms {:.3e}",
        report.algorithm,
        report.n_redundant,
        report.n_sparse,
        report.compression_ratio,
        report.preservation_max,
        report.preservation_rms
    );
    println!("test accuracy: parent {acc_parent:.4}, child {acc_child:.4}");
    println!("wrote {} and {}", out.display(), report_path.display());
    Ok(())
}

pub fn eval(ctx: &Context, args: &EvalArgs) -> Result<()> {
    let mlp = io::load_model(ctx.input(&args.model))?;
    let (train, test) = load_data(&args.data)?;
    let data = match args.split {
        Split::Train => train,
        Split::Test => test,
    };
    check_fits(&mlp, &data)?;
    let (loss, acc) = evaluate(&mlp, &data)?;
    println!("loss {loss:.6} accuracy {acc:.4}");
    Ok(())
}

pub fn finetune(ctx: &Context, args: &FinetuneArgs) -> Result<()> {
    let cfg = train_config(&args.sgd)?;
    let model_path = ctx.input(&args.model);
    let file = ModelFile::read(&model_path)?;
    let mlp = file.to_mlp(&model_path)?;
    let (train, test) = load_data(&args.data)?;
    check_fits(&mlp, &train)?;
    let (tuned, history) = train_sgd(&mlp, &train, &cfg)?;
    let (loss, acc) = evaluate(&tuned, &test)?;
    let out = ctx.output(&args.out)?;
    let mut tuned_file = ModelFile::from_mlp(&tuned);
    tuned_file.metadata = file.metadata;
    tuned_file.metadata.insert(
        "finetune".into(),
        json!({ "from": model_path.display().to_string(), "train": train_json(&cfg) }),
    );
    tuned_file.write(&out)?;
    let history_path = ctx.output(
        &args
            .history
            .clone()
            .unwrap_or_else(|| with_suffix(&args.out, ".history.csv")),
    )?;
    write_history_csv(&history, &history_path, true)?;
    println!("fine-tuned: test loss {loss:.5}, accuracy {acc:.4}");
    println!(
        "wrote {} and appended to {}",
        out.display(),
        history_path.display()
    );
    Ok(())
}

pub fn verify(args: &VerifyArgs) -> Result<()> {
    if args.list {
        for c in verify::checks() {
            println!("{:<28} {}", c.name, c.description);
        }
        return Ok(());
    }
    let outcomes = verify::run_checks(args.seed, args.instances, args.check.as_deref());
    if outcomes.is_empty() {
        return Err(CliError::user(format!(
            "no check matches {:?}; see --list",
            args.check.as_deref().unwrap_or("")
        )));
    }
    for o in &outcomes {
        println!(
            "{:<4} {:<28} {}",
            if o.passed { "PASS" } else { "FAIL" },
            o.name,
            o.detail
        );
    }
    let failed: Vec<&str> = outcomes
        .iter()
        .filter(|o| !o.passed)
        .map(|o| o.name)
        .collect();
    if failed.is_empty() {
        println!("all {} checks passed", outcomes.len());
        Ok(())
    } else {
        Err(CliError::internal(format!(
            "failed checks: {}",
            failed.join(", ")
        )))
    }
}

pub fn report(ctx: &Context, args: &ReportArgs) -> Result<()> {
    let sparse = sparse_config(&args.sparse)?;
    let (train, test) = load_data(&args.data)?;
    let sgd = |epochs| {
        train_config(&SgdArgs {
            epochs,
            lr: args.lr,
            weight_decay: args.weight_decay,
            momentum: args.momentum,
            batch_size: args.batch_size,
            seed: args.seed,
        })
    };
    let parent = match &args.model {
        Some(p) => Some(io::load_model(ctx.input(p))?),
        None => None,
    };
    let depth = parent.as_ref().map_or(args.arch.0.len() - 1, Mlp::len);
    if args.at == 0 || args.at >= depth {
        return Err(CliError::user(format!(
            "--at {} is not an interior position of a {depth}-layer network",
            args.at
        )));
    }
    let cfg = DeskConfig {
        arch: args.arch.0.clone(),
        hidden: args.hidden_act,
        train: sgd(args.epochs)?,
        finetune: sgd(args.finetune_epochs)?,
        insert_after: args.at - 1,
        width: args.width,
        activation: args.act,
        sparse,
        probe_size: args.sparse.probe_size,
        alg3_row_sample: args.sparse.row_sample,
        fold_beta: args.sparse.fold_beta,
        algorithms: args.algs.clone(),
        seed: args.seed,
    };
    if let Some(p) = &parent {
        check_fits(p, &train)?;
    } else if args.arch.0[0] != train.features().cols() {
        return Err(CliError::user(format!(
            "--arch starts with {} but the data has {} features",
            args.arch.0[0],
            train.features().cols()
        )));
    }
    let outcome = experiment::run_desk(&train, &test, &cfg, parent)?;
    let rows = outcome.report_rows(&args.run_id);
    let out = ctx.output(&args.out)?;
    write_report_csv(&rows, &out)?;
    if args.save_models {
        let parent_path = ctx.output(Path::new(&format!("{}-parent.model", args.run_id)))?;
        io::save_model(&outcome.parent, &parent_path)?;
        for run in &outcome.runs {
            let stem = format!("{}-{}", args.run_id, run.report.algorithm);
            io::save_model(&run.child, ctx.output(Path::new(&format!("{stem}.model")))?)?;
            io::save_model(
                &run.finetuned,
                ctx.output(Path::new(&format!("{stem}-finetuned.model")))?,
            )?;
            write_history_csv(
                &run.finetune_history,
                ctx.output(Path::new(&format!("{stem}-finetuned.history.csv")))?,
                false,
            )?;
        }
    }
    println!("parent test accuracy {:.4}", outcome.acc_parent);
    println!(
        "{:<9} {:>9} {:>8} {:>10} {:>10}",
        "algorithm", "neurons", "ratio", "post-morph", "fine-tuned"
    );
    for run in &outcome.runs {
        println!(
            "{:<9} {:>4}->{:<4} {:>8.3} {:>10.4} {:>10.4}",
            run.report.algorithm.to_string(),
            run.report.n_redundant,
            run.report.n_sparse,
            run.report.compression_ratio,
            run.acc_post_morph,
            run.acc_after_finetune
        );
    }
    info!("report written to {}", out.display());
    println!("wrote {}", out.display());
    Ok(())
}
