//! Datasets, IDX ingestion, the model file format and CSV reports.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{LinalgError, Matrix};
use crate::morph::MorphReport;
use crate::network::{Activation, EpochRecord, Layer, Mlp, NetworkError};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const MODEL_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad magic number {found:#010x}, expected {expected:#010x}")]
    BadMagic {
        path: PathBuf,
        expected: u32,
        found: u32,
    },
    #[error("{path}: truncated, expected {expected} bytes but found {got}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        got: usize,
    },
    #[error("image file holds {images} items but label file holds {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("{path}: parse error at `{field}`: {message}")]
    Parse {
        path: PathBuf,
        field: String,
        message: String,
    },
    #[error("{path}: model schema version {found} is not supported (expected {supported})")]
    VersionMismatch {
        path: PathBuf,
        found: u32,
        supported: u32,
    },
    #[error("{path}: invalid model at `{field}`: {message}")]
    InvalidModel {
        path: PathBuf,
        field: String,
        message: String,
    },
    #[error("invalid dataset: {0}")]
    Dataset(String),
    #[error("no reports to write")]
    EmptyReport,
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, IoError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Features plus integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Matrix,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(IoError::Dataset(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if let Some(l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(IoError::Dataset(format!(
                "label {l} is outside [0, {num_classes})"
            )));
        }
        Ok(Self {
            features,
            labels,
            num_classes,
        })
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, rows: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_rows(rows),
            labels: rows.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// First `n` rows (or all of them if fewer).
    pub fn head(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }
}

/// Gaussian class blobs (unit variance) whose means sit
/// `separation / √2` along distinct coordinate axes, so classes on
/// different axes are `separation` apart. Labels cycle `0, 1, …`, which
/// keeps the classes balanced up to rounding.
pub fn synth_dataset_with(
    seed: u64,
    n: usize,
    d: usize,
    classes: usize,
    separation: f64,
) -> Result<Dataset> {
    if n == 0 || d == 0 || classes == 0 {
        return Err(IoError::Dataset(
            "n, d and classes must all be positive".into(),
        ));
    }
    let unit = separation / std::f64::consts::SQRT_2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    let mut data = Vec::with_capacity(n * d);
    for &c in &labels {
        for j in 0..d {
            let noise: f64 = StandardNormal.sample(&mut rng);
            let mean = if classes > 1 && j == c % d {
                unit * (1 + c / d) as f64
            } else {
                0.0
            };
            data.push(mean + noise);
        }
    }
    let features = Matrix::from_vec(n, d, data).map_err(|e| IoError::Dataset(e.to_string()))?;
    Dataset::new(features, labels, classes)
}

pub fn synth_dataset(seed: u64, n: usize, d: usize, classes: usize) -> Result<Dataset> {
    synth_dataset_with(seed, n, d, classes, 6.0)
}

/// Reads a file, gunzipping it when the name ends in `.gz` or when only a
/// `.gz` sibling exists.
fn read_maybe_gz(path: &Path) -> Result<(PathBuf, Vec<u8>)> {
    let gz_sibling = PathBuf::from(format!("{}.gz", path.display()));
    let (actual, gz) = if path.exists() {
        (
            path.to_path_buf(),
            path.extension().is_some_and(|e| e == "gz"),
        )
    } else if gz_sibling.exists() {
        (gz_sibling, true)
    } else {
        (path.to_path_buf(), false)
    };
    let file = File::open(&actual).map_err(io_err(&actual))?;
    let mut bytes = Vec::new();
    if gz {
        GzDecoder::new(BufReader::new(file))
            .read_to_end(&mut bytes)
            .map_err(io_err(&actual))?;
    } else {
        BufReader::new(file)
            .read_to_end(&mut bytes)
            .map_err(io_err(&actual))?;
    }
    Ok((actual, bytes))
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| IoError::Truncated {
            path: path.to_path_buf(),
            expected: offset + 4,
            got: bytes.len(),
        })
}

/// Decoded IDX image file: `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(IoError::BadMagic {
            path: path.to_path_buf(),
            expected: IDX_IMAGES_MAGIC,
            found: magic,
        });
    }
    let count = be_u32(bytes, 4, path)? as usize;
    let rows = be_u32(bytes, 8, path)? as usize;
    let cols = be_u32(bytes, 12, path)? as usize;
    let expected = 16 + count * rows * cols;
    if bytes.len() < expected {
        return Err(IoError::Truncated {
            path: path.to_path_buf(),
            expected,
            got: bytes.len(),
        });
    }
    Ok((count, rows, cols, bytes[16..expected].to_vec()))
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(IoError::BadMagic {
            path: path.to_path_buf(),
            expected: IDX_LABELS_MAGIC,
            found: magic,
        });
    }
    let count = be_u32(bytes, 4, path)? as usize;
    let expected = 8 + count;
    if bytes.len() < expected {
        return Err(IoError::Truncated {
            path: path.to_path_buf(),
            expected,
            got: bytes.len(),
        });
    }
    Ok(bytes[8..expected].to_vec())
}

/// Loads an IDX image/label pair; pixels are scaled to `[0, 1]`.
pub fn read_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let (img_path, img_bytes) = read_maybe_gz(images_path.as_ref())?;
    let (lbl_path, lbl_bytes) = read_maybe_gz(labels_path.as_ref())?;
    let (count, rows, cols, pixels) = parse_idx_images(&img_bytes, &img_path)?;
    let labels = parse_idx_labels(&lbl_bytes, &lbl_path)?;
    if labels.len() != count {
        return Err(IoError::CountMismatch {
            images: count,
            labels: labels.len(),
        });
    }
    let features = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    let features = Matrix::from_vec(count, rows * cols, features)
        .map_err(|e| IoError::Dataset(e.to_string()))?;
    let labels: Vec<usize> = labels.into_iter().map(usize::from).collect();
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    Dataset::new(features, labels, num_classes)
}

/// The standard MNIST train and test splits from a directory holding the
/// four IDX files (optionally gzipped).
pub fn read_mnist_dir(dir: impl AsRef<Path>) -> Result<(Dataset, Dataset)> {
    let dir = dir.as_ref();
    let train = read_idx(
        dir.join("train-images-idx3-ubyte"),
        dir.join("train-labels-idx1-ubyte"),
    )?;
    let test = read_idx(
        dir.join("t10k-images-idx3-ubyte"),
        dir.join("t10k-labels-idx1-ubyte"),
    )?;
    Ok((train, test))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    #[serde(rename = "in")]
    pub d_in: usize,
    #[serde(rename = "out")]
    pub d_out: usize,
    pub activation: Activation,
    /// Row-major `in × out`.
    pub weights: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias: Option<Vec<f64>>,
}

/// On-disk model document. Floats are written in shortest round-trip form,
/// so every weight survives a save/load cycle bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub schema_version: u32,
    pub layers: Vec<LayerRecord>,
    #[serde(default)]
    pub metadata: BTreeMap<String, serde_json::Value>,
}

impl ModelFile {
    pub fn from_mlp(mlp: &Mlp) -> Self {
        let layers = mlp
            .layers()
            .iter()
            .map(|l| LayerRecord {
                d_in: l.d_in(),
                d_out: l.d_out(),
                activation: l.activation(),
                weights: l.weight().as_slice().to_vec(),
                bias: l.bias().map(<[f64]>::to_vec),
            })
            .collect();
        Self {
            schema_version: MODEL_SCHEMA_VERSION,
            layers,
            metadata: BTreeMap::new(),
        }
    }

    pub fn with_metadata(
        mut self,
        key: impl Into<String>,
        value: impl Into<serde_json::Value>,
    ) -> Self {
        self.metadata.insert(key.into(), value.into());
        self
    }

    pub fn to_mlp(&self, path: &Path) -> Result<Mlp> {
        let invalid = |field: String, message: String| IoError::InvalidModel {
            path: path.to_path_buf(),
            field,
            message,
        };
        let mut layers = Vec::with_capacity(self.layers.len());
        for (k, rec) in self.layers.iter().enumerate() {
            let weight = Matrix::from_vec(rec.d_in, rec.d_out, rec.weights.clone())
                .map_err(|e: LinalgError| invalid(format!("layers[{k}].weights"), e.to_string()))?;
            let layer = Layer::new(weight, rec.bias.clone(), rec.activation)
                .map_err(|e| invalid(format!("layers[{k}].bias"), e.to_string()))?;
            layers.push(layer);
        }
        Mlp::new(layers).map_err(|e: NetworkError| invalid("layers".into(), e.to_string()))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        let file = File::create(path).map_err(io_err(path))?;
        let mut w = BufWriter::new(file);
        serde_json::to_writer_pretty(&mut w, self).map_err(|e| IoError::Parse {
            path: path.to_path_buf(),
            field: String::new(),
            message: e.to_string(),
        })?;
        w.write_all(b"\n").map_err(io_err(path))?;
        w.flush().map_err(io_err(path))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        // Check the version before the full schema so old/new files fail
        // with a version error rather than a field error.
        #[derive(Deserialize)]
        struct Probe {
            schema_version: Option<u32>,
        }
        if let Ok(Probe {
            schema_version: Some(found),
        }) = serde_json::from_str::<Probe>(&text)
        {
            if found != MODEL_SCHEMA_VERSION {
                return Err(IoError::VersionMismatch {
                    path: path.to_path_buf(),
                    found,
                    supported: MODEL_SCHEMA_VERSION,
                });
            }
        }
        let de = &mut serde_json::Deserializer::from_str(&text);
        let file: ModelFile = serde_path_to_error::deserialize(de).map_err(|e| IoError::Parse {
            path: path.to_path_buf(),
            field: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        Ok(file)
    }
}

pub fn save_model(mlp: &Mlp, path: impl AsRef<Path>) -> Result<()> {
    ModelFile::from_mlp(mlp).write(path)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Mlp> {
    let path = path.as_ref();
    ModelFile::read(path)?.to_mlp(path)
}

/// One line of the morph report CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub run_id: String,
    pub algorithm: String,
    pub activation: String,
    pub n_redundant: usize,
    pub n_sparse: usize,
    pub compression_ratio: f64,
    pub preservation_max: f64,
    pub preservation_rms: f64,
    pub sparse_stop_reason: String,
    pub acc_parent: Option<f64>,
    pub acc_post_morph: Option<f64>,
    pub acc_after_finetune: Option<f64>,
    pub wall_time_s: f64,
}

impl ReportRow {
    pub fn from_report(run_id: impl Into<String>, report: &MorphReport) -> Self {
        Self {
            run_id: run_id.into(),
            algorithm: report.algorithm.to_string(),
            activation: report.activation.to_string(),
            n_redundant: report.n_redundant,
            n_sparse: report.n_sparse,
            compression_ratio: report.compression_ratio,
            preservation_max: report.preservation_max,
            preservation_rms: report.preservation_rms,
            sparse_stop_reason: report
                .sparse_stop_reason
                .map_or_else(|| "none".to_string(), |r| r.to_string()),
            acc_parent: None,
            acc_post_morph: None,
            acc_after_finetune: None,
            wall_time_s: report.wall_time,
        }
    }
}

pub const REPORT_COLUMNS: [&str; 13] = [
    "run_id",
    "algorithm",
    "activation",
    "n_redundant",
    "n_sparse",
    "compression_ratio",
    "preservation_max",
    "preservation_rms",
    "sparse_stop_reason",
    "acc_parent",
    "acc_post_morph",
    "acc_after_finetune",
    "wall_time_s",
];

fn write_rows<T: Serialize>(rows: &[T], path: &Path, append: bool) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let has_content = append && fs::metadata(path).map(|m| m.len() > 0).unwrap_or(false);
    let file = fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)
        .map_err(io_err(path))?;
    let mut w = csv::WriterBuilder::new()
        .has_headers(!has_content)
        .from_writer(file);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(io_err(path))
}

/// Header plus one row per report, in the given order.
pub fn write_report_csv(rows: &[ReportRow], path: impl AsRef<Path>) -> Result<()> {
    if rows.is_empty() {
        return Err(IoError::EmptyReport);
    }
    write_rows(rows, path.as_ref(), false)
}

/// Appends rows, writing the header only when the file is new or empty.
pub fn append_report_csv(rows: &[ReportRow], path: impl AsRef<Path>) -> Result<()> {
    if rows.is_empty() {
        return Err(IoError::EmptyReport);
    }
    write_rows(rows, path.as_ref(), true)
}

pub fn read_report_csv(path: impl AsRef<Path>) -> Result<Vec<ReportRow>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize()
        .map(|row| row.map_err(IoError::from))
        .collect()
}

pub fn write_history_csv(
    history: &[EpochRecord],
    path: impl AsRef<Path>,
    append: bool,
) -> Result<()> {
    write_rows(history, path.as_ref(), append)
}
