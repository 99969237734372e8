//! Dataset ingestion, side-information construction, and synthetic fixtures.
//!
//! A [`Dataset`] carries features, optional side information, and optional
//! held-out evaluation labels. Evaluation labels are never consumed by the
//! training path; every read through [`EvalLabels::values`] increments an
//! audit counter so tests can assert that training left it untouched.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("bad IDX magic in {path}: expected {expected:#010x}, found {found:#010x}")]
    BadMagic {
        path: String,
        expected: u32,
        found: u32,
    },
    #[error("truncated IDX payload in {path}: expected {expected} bytes, found {found}")]
    Truncated {
        path: String,
        expected: usize,
        found: usize,
    },
    #[error("image/label count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("empty file: {0}")]
    EmptyFile(String),
    #[error("missing column '{0}'")]
    MissingColumn(String),
    #[error("non-numeric cell '{value}' at row {row}, column '{column}'")]
    NonNumericCell {
        row: usize,
        column: String,
        value: String,
    },
    #[error("csv error in {path}: {source}")]
    Csv { path: String, source: csv::Error },
    #[error("row count mismatch between fields: {0} vs {1}")]
    RowMismatch(usize, usize),
    #[error("side class {class} out of range for {n_classes} classes")]
    SideClassOutOfRange { class: usize, n_classes: usize },
    #[error("label {0} outside the domain of the requested side map")]
    LabelOutsideMapDomain(usize),
    #[error("split fraction {0} leaves the training split empty")]
    EmptySplit(f64),
    #[error("invalid split fraction {0}: must be in (0, 1]")]
    BadFraction(f64),
    #[error("{0}")]
    Invalid(String),
}

type Result<T> = std::result::Result<T, DataError>;

/// Per-instance side information: the auxiliary variable correlated with
/// the unknown label, never the label itself.
#[derive(Debug, Clone, PartialEq)]
pub enum SideInfo {
    Categorical {
        classes: Vec<usize>,
        n_classes: usize,
    },
    Continuous(Vec<f64>),
}

impl SideInfo {
    pub fn categorical(classes: Vec<usize>) -> Result<Self> {
        let n_classes = classes.iter().max().map_or(0, |m| m + 1);
        Ok(Self::Categorical { classes, n_classes })
    }

    pub fn categorical_with_classes(classes: Vec<usize>, n_classes: usize) -> Result<Self> {
        if let Some(&bad) = classes.iter().find(|&&c| c >= n_classes) {
            return Err(DataError::SideClassOutOfRange {
                class: bad,
                n_classes,
            });
        }
        Ok(Self::Categorical { classes, n_classes })
    }

    pub fn continuous(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(DataError::Invalid(
                "continuous side values must be finite".into(),
            ));
        }
        Ok(Self::Continuous(values))
    }

    pub fn len(&self) -> usize {
        match self {
            Self::Categorical { classes, .. } => classes.len(),
            Self::Continuous(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn select(&self, idx: &[usize]) -> Self {
        match self {
            Self::Categorical { classes, n_classes } => Self::Categorical {
                classes: idx.iter().map(|&i| classes[i]).collect(),
                n_classes: *n_classes,
            },
            Self::Continuous(v) => Self::Continuous(idx.iter().map(|&i| v[i]).collect()),
        }
    }
}

/// Held-out labels with an access audit: every `values()` call is counted.
#[derive(Debug)]
pub struct EvalLabels {
    values: Vec<f64>,
    reads: AtomicU64,
}

impl EvalLabels {
    fn new(values: Vec<f64>) -> Self {
        Self {
            values,
            reads: AtomicU64::new(0),
        }
    }

    /// Audited access. Training code must never call this; the counter
    /// makes violations assertable.
    pub fn values(&self) -> &[f64] {
        self.reads.fetch_add(1, Ordering::Relaxed);
        &self.values
    }

    pub fn read_count(&self) -> u64 {
        self.reads.load(Ordering::Relaxed)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Internal, uncounted access for dataset plumbing (splits, clones).
    pub(crate) fn raw(&self) -> &[f64] {
        &self.values
    }
}

impl Clone for EvalLabels {
    fn clone(&self) -> Self {
        Self::new(self.values.clone())
    }
}

/// Features plus optional side information and held-out labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    features: Array2<f64>,
    side: Option<SideInfo>,
    eval_labels: Option<EvalLabels>,
    split: String,
}

impl Dataset {
    pub fn new(
        features: Array2<f64>,
        side: Option<SideInfo>,
        eval_labels: Option<Vec<f64>>,
        split: impl Into<String>,
    ) -> Result<Self> {
        let n = features.nrows();
        if let Some(s) = &side {
            if s.len() != n {
                return Err(DataError::RowMismatch(n, s.len()));
            }
        }
        if let Some(e) = &eval_labels {
            if e.len() != n {
                return Err(DataError::RowMismatch(n, e.len()));
            }
        }
        Ok(Self {
            features,
            side,
            eval_labels: eval_labels.map(EvalLabels::new),
            split: split.into(),
        })
    }

    pub fn n(&self) -> usize {
        self.features.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.features.ncols()
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn side(&self) -> Option<&SideInfo> {
        self.side.as_ref()
    }

    pub fn eval_labels(&self) -> Option<&EvalLabels> {
        self.eval_labels.as_ref()
    }

    pub fn split_tag(&self) -> &str {
        &self.split
    }

    pub fn with_side(mut self, side: SideInfo) -> Result<Self> {
        if side.len() != self.n() {
            return Err(DataError::RowMismatch(self.n(), side.len()));
        }
        self.side = Some(side);
        Ok(self)
    }

    /// Total audited reads of the evaluation labels.
    pub fn eval_read_count(&self) -> u64 {
        self.eval_labels.as_ref().map_or(0, |e| e.read_count())
    }

    /// Seed-deterministic disjoint partition. Standardization is *not*
    /// applied here; fit a [`Standardizer`] on the returned train split.
    pub fn split(&self, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(train_fraction > 0.0 && train_fraction <= 1.0) {
            return Err(DataError::BadFraction(train_fraction));
        }
        let n = self.n();
        let n_train = ((train_fraction * n as f64).round() as usize).min(n);
        if n_train == 0 {
            return Err(DataError::EmptySplit(train_fraction));
        }
        let mut idx: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        idx.shuffle(&mut rng);
        let (train_idx, test_idx) = idx.split_at(n_train);
        Ok((
            self.select(train_idx, "train"),
            self.select(test_idx, "test"),
        ))
    }

    fn select(&self, idx: &[usize], tag: &str) -> Dataset {
        let d = self.n_features();
        let mut features = Array2::zeros((idx.len(), d));
        for (r, &i) in idx.iter().enumerate() {
            features.row_mut(r).assign(&self.features.row(i));
        }
        Dataset {
            features,
            side: self.side.as_ref().map(|s| s.select(idx)),
            eval_labels: self
                .eval_labels
                .as_ref()
                .map(|e| EvalLabels::new(idx.iter().map(|&i| e.raw()[i]).collect())),
            split: tag.to_string(),
        }
    }
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })?;
    Ok(buf)
}

fn be_u32(bytes: &[u8], off: usize, path: &Path) -> Result<u32> {
    bytes
        .get(off..off + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| DataError::Truncated {
            path: path.display().to_string(),
            expected: off + 4,
            found: bytes.len(),
        })
}

/// Load an IDX image/label pair (big-endian, magics 2051/2049). Pixels are
/// scaled to [0,1]; labels are stored as held-out evaluation material.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img = read_file(images_path)?;
    let magic = be_u32(&img, 0, images_path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(DataError::BadMagic {
            path: images_path.display().to_string(),
            expected: IDX_IMAGES_MAGIC,
            found: magic,
        });
    }
    let n = be_u32(&img, 4, images_path)? as usize;
    let rows = be_u32(&img, 8, images_path)? as usize;
    let cols = be_u32(&img, 12, images_path)? as usize;
    let need = 16 + n * rows * cols;
    if img.len() < need {
        return Err(DataError::Truncated {
            path: images_path.display().to_string(),
            expected: need,
            found: img.len(),
        });
    }

    let lab = read_file(labels_path)?;
    let magic = be_u32(&lab, 0, labels_path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(DataError::BadMagic {
            path: labels_path.display().to_string(),
            expected: IDX_LABELS_MAGIC,
            found: magic,
        });
    }
    let n_lab = be_u32(&lab, 4, labels_path)? as usize;
    if lab.len() < 8 + n_lab {
        return Err(DataError::Truncated {
            path: labels_path.display().to_string(),
            expected: 8 + n_lab,
            found: lab.len(),
        });
    }
    if n != n_lab {
        return Err(DataError::CountMismatch {
            images: n,
            labels: n_lab,
        });
    }

    let d = rows * cols;
    let features = Array2::from_shape_fn((n, d), |(i, j)| img[16 + i * d + j] as f64 / 255.0);
    let labels: Vec<f64> = lab[8..8 + n].iter().map(|&b| b as f64).collect();
    Dataset::new(features, None, Some(labels), "full")
}

/// Write an IDX image/label pair from byte-valued pixels; the inverse of
/// [`load_idx`] up to the documented [0,1] scaling.
pub fn write_idx(
    images_path: &Path,
    labels_path: &Path,
    pixels: &Array2<u8>,
    labels: &[u8],
    rows: usize,
    cols: usize,
) -> Result<()> {
    let n = pixels.nrows();
    assert_eq!(pixels.ncols(), rows * cols);
    assert_eq!(labels.len(), n);
    let io_err = |path: &Path, source| DataError::Io {
        path: path.display().to_string(),
        source,
    };

    let mut img = Vec::with_capacity(16 + n * rows * cols);
    img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    img.extend_from_slice(&(n as u32).to_be_bytes());
    img.extend_from_slice(&(rows as u32).to_be_bytes());
    img.extend_from_slice(&(cols as u32).to_be_bytes());
    img.extend(pixels.iter().copied());
    std::fs::File::create(images_path)
        .and_then(|mut f| f.write_all(&img))
        .map_err(|e| io_err(images_path, e))?;

    let mut lab = Vec::with_capacity(8 + n);
    lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(n as u32).to_be_bytes());
    lab.extend(labels.iter().copied());
    std::fs::File::create(labels_path)
        .and_then(|mut f| f.write_all(&lab))
        .map_err(|e| io_err(labels_path, e))?;
    Ok(())
}

/// Role of a CSV column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnRole {
    Feature,
    Side,
    EvalLabel,
    Drop,
}

/// Whether the side column holds class ids or real values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SideKindSpec {
    Categorical,
    #[default]
    Continuous,
}

/// Column-role schema for tabular ingestion, loadable from a TOML file:
///
/// ```toml
/// delimiter = ","
/// side_kind = "continuous"
///
/// [columns]
/// age = "feature"
/// motor_UPDRS = "side"
/// total_UPDRS = "eval_label"
/// ```
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TabularSchema {
    #[serde(default = "default_delimiter")]
    pub delimiter: String,
    #[serde(default)]
    pub side_kind: SideKindSpec,
    pub columns: BTreeMap<String, ColumnRole>,
}

fn default_delimiter() -> String {
    ",".into()
}

impl TabularSchema {
    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })?;
        toml::from_str(&text).map_err(|e| DataError::Invalid(format!("schema parse: {e}")))
    }
}

/// What a tabular load dropped and kept.
#[derive(Debug, Clone, Default)]
pub struct LoadReport {
    pub rows_loaded: usize,
    pub rows_dropped_missing: usize,
    pub feature_columns: Vec<String>,
}

/// Cells treated as missing; rows containing one are dropped and counted.
const MISSING_MARKERS: [&str; 4] = ["", "na", "n/a", "?"];

/// Load a delimited file with a header row, mapping columns to roles per
/// the schema. Features are returned *unstandardized*: split first, then
/// fit a [`Standardizer`] on the training split.
pub fn load_tabular_csv(path: &Path, schema: &TabularSchema) -> Result<(Dataset, LoadReport)> {
    let delim = schema.delimiter.as_bytes().first().copied().unwrap_or(b',');
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(delim)
        .has_headers(true)
        .from_path(path)
        .map_err(|source| DataError::Csv {
            path: path.display().to_string(),
            source,
        })?;
    let headers: Vec<String> = rdr
        .headers()
        .map_err(|source| DataError::Csv {
            path: path.display().to_string(),
            source,
        })?
        .iter()
        .map(|h| h.trim().trim_matches('"').to_string())
        .collect();
    if headers.is_empty() {
        return Err(DataError::EmptyFile(path.display().to_string()));
    }
    for name in schema.columns.keys() {
        if !headers.iter().any(|h| h == name) {
            return Err(DataError::MissingColumn(name.clone()));
        }
    }
    let mut feature_cols = Vec::new();
    let mut side_col = None;
    let mut eval_col = None;
    for (i, h) in headers.iter().enumerate() {
        match schema.columns.get(h) {
            Some(ColumnRole::Feature) => feature_cols.push((i, h.clone())),
            Some(ColumnRole::Side) => side_col = Some(i),
            Some(ColumnRole::EvalLabel) => eval_col = Some(i),
            Some(ColumnRole::Drop) => {}
            None => log::warn!("column '{h}' not named in schema; dropping"),
        }
    }

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut side_raw: Vec<f64> = Vec::new();
    let mut eval_raw: Vec<f64> = Vec::new();
    let mut dropped_missing = 0usize;
    for (r, record) in rdr.records().enumerate() {
        let record = record.map_err(|source| DataError::Csv {
            path: path.display().to_string(),
            source,
        })?;
        let parse_cell = |i: usize, name: &str| -> Result<Option<f64>> {
            let cell = record.get(i).unwrap_or("").trim().trim_matches('"');
            if MISSING_MARKERS.contains(&cell.to_ascii_lowercase().as_str()) {
                return Ok(None);
            }
            cell.parse::<f64>()
                .map(Some)
                .map_err(|_| DataError::NonNumericCell {
                    row: r + 1,
                    column: name.to_string(),
                    value: cell.to_string(),
                })
        };
        let mut parsed = Vec::with_capacity(feature_cols.len());
        let mut missing = false;
        for (i, name) in &feature_cols {
            match parse_cell(*i, name)? {
                Some(v) => parsed.push(v),
                None => missing = true,
            }
        }
        let side_v = match side_col {
            Some(i) => match parse_cell(i, "side")? {
                Some(v) => Some(v),
                None => {
                    missing = true;
                    None
                }
            },
            None => None,
        };
        let eval_v = match eval_col {
            Some(i) => match parse_cell(i, "eval_label")? {
                Some(v) => Some(v),
                None => {
                    missing = true;
                    None
                }
            },
            None => None,
        };
        if missing {
            dropped_missing += 1;
            continue;
        }
        rows.push(parsed);
        if let Some(v) = side_v {
            side_raw.push(v);
        }
        if let Some(v) = eval_v {
            eval_raw.push(v);
        }
    }
    if rows.is_empty() {
        return Err(DataError::EmptyFile(path.display().to_string()));
    }
    if dropped_missing > 0 {
        log::warn!(
            "dropped {dropped_missing} rows with missing values from {}",
            path.display()
        );
    }

    let d = feature_cols.len();
    let n = rows.len();
    let features = Array2::from_shape_fn((n, d), |(i, j)| rows[i][j]);
    let side = match (side_col, schema.side_kind) {
        (None, _) => None,
        (Some(_), SideKindSpec::Continuous) => Some(SideInfo::continuous(side_raw)?),
        (Some(_), SideKindSpec::Categorical) => {
            let classes: Vec<usize> = side_raw.iter().map(|&v| v as usize).collect();
            Some(SideInfo::categorical(classes)?)
        }
    };
    let eval = eval_col.map(|_| eval_raw);
    let report = LoadReport {
        rows_loaded: n,
        rows_dropped_missing: dropped_missing,
        feature_columns: feature_cols.into_iter().map(|(_, n)| n).collect(),
    };
    Ok((Dataset::new(features, side, eval, "full")?, report))
}

/// Column standardization fit on a training split. Constant columns
/// cannot be standardized and are dropped (indices recorded).
#[derive(Debug, Clone)]
pub struct Standardizer {
    mean: Vec<f64>,
    std: Vec<f64>,
    keep: Vec<bool>,
    pub dropped_columns: Vec<usize>,
}

impl Standardizer {
    pub fn fit(features: &Array2<f64>) -> Self {
        let n = features.nrows() as f64;
        let d = features.ncols();
        let mut mean = vec![0.0; d];
        let mut std = vec![0.0; d];
        let mut keep = vec![true; d];
        let mut dropped = Vec::new();
        for j in 0..d {
            let col = features.column(j);
            let m = col.sum() / n;
            let var = col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
            mean[j] = m;
            std[j] = var.sqrt();
            if std[j] < 1e-12 {
                keep[j] = false;
                dropped.push(j);
            }
        }
        if !dropped.is_empty() {
            log::warn!(
                "dropping {} constant feature column(s): {:?}",
                dropped.len(),
                dropped
            );
        }
        Self {
            mean,
            std,
            keep,
            dropped_columns: dropped,
        }
    }

    pub fn n_kept(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }

    pub fn transform(&self, features: &Array2<f64>) -> Array2<f64> {
        let n = features.nrows();
        let mut out = Array2::zeros((n, self.n_kept()));
        for i in 0..n {
            let mut c = 0usize;
            for j in 0..features.ncols() {
                if self.keep[j] {
                    out[(i, c)] = (features[(i, j)] - self.mean[j]) / self.std[j];
                    c += 1;
                }
            }
        }
        out
    }

    /// Standardize a dataset's features, keeping the other fields.
    pub fn transform_dataset(&self, ds: &Dataset) -> Dataset {
        Dataset {
            features: self.transform(&ds.features),
            side: ds.side.clone(),
            eval_labels: ds.eval_labels.clone(),
            split: ds.split.clone(),
        }
    }
}

/// Built-in label-to-side maps for the ten-class ablations, plus custom
/// tables.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SideMap {
    /// identity: the supervised extreme
    Pure,
    /// every two labels collapse to one side class: floor(label / 2)
    Pairs,
    /// {0,1,2,3} -> 0, {4,5,6} -> 1, {7,8} -> 2, {9} -> 3
    Heterogeneous,
    /// explicit label -> side class table
    Custom(Vec<usize>),
}

/// Apply a label coarsening map, producing categorical side information.
pub fn side_map(labels: &[usize], mapping: &SideMap) -> Result<SideInfo> {
    let mapped: Vec<usize> = match mapping {
        SideMap::Pure => {
            if let Some(&bad) = labels.iter().find(|&&l| l >= 10) {
                return Err(DataError::LabelOutsideMapDomain(bad));
            }
            labels.to_vec()
        }
        SideMap::Pairs => {
            if let Some(&bad) = labels.iter().find(|&&l| l >= 10) {
                return Err(DataError::LabelOutsideMapDomain(bad));
            }
            labels.iter().map(|&l| l / 2).collect()
        }
        SideMap::Heterogeneous => {
            let table = [0usize, 0, 0, 0, 1, 1, 1, 2, 2, 3];
            if let Some(&bad) = labels.iter().find(|&&l| l >= table.len()) {
                return Err(DataError::LabelOutsideMapDomain(bad));
            }
            labels.iter().map(|&l| table[l]).collect()
        }
        SideMap::Custom(table) => {
            if let Some(&bad) = labels.iter().find(|&&l| l >= table.len()) {
                return Err(DataError::LabelOutsideMapDomain(bad));
            }
            labels.iter().map(|&l| table[l]).collect()
        }
    };
    SideInfo::categorical(mapped)
}

/// Gaussian-cluster fixture with known classes used as both side
/// information and evaluation labels. Class centers sit on a circle in
/// the first two dimensions (radius 3) with a small seeded offset, so any
/// positive `spread` well below the center separation keeps classes
/// linearly separable.
pub fn make_blobs(
    n_per_class: usize,
    n_classes: usize,
    dim: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    if n_per_class == 0 || n_classes == 0 || dim == 0 {
        return Err(DataError::Invalid(
            "make_blobs needs positive counts".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = Array2::zeros((n_classes, dim));
    for k in 0..n_classes {
        let angle = 2.0 * std::f64::consts::PI * k as f64 / n_classes as f64;
        centers[(k, 0)] = 3.0 * angle.cos();
        if dim > 1 {
            centers[(k, 1)] = 3.0 * angle.sin();
        }
        for j in 0..dim {
            let eps: f64 = StandardNormal.sample(&mut rng);
            centers[(k, j)] += 0.25 * eps;
        }
    }
    let n = n_per_class * n_classes;
    let mut features = Array2::zeros((n, dim));
    let mut classes = Vec::with_capacity(n);
    for k in 0..n_classes {
        for i in 0..n_per_class {
            let r = k * n_per_class + i;
            for j in 0..dim {
                let eps: f64 = StandardNormal.sample(&mut rng);
                features[(r, j)] = centers[(k, j)] + spread * eps;
            }
            classes.push(k);
        }
    }
    let eval: Vec<f64> = classes.iter().map(|&c| c as f64).collect();
    let side = SideInfo::categorical(classes)?;
    Dataset::new(features, Some(side), Some(eval), "full")
}

/// Join the two student-performance files (semicolon-delimited, quoted
/// strings) on the thirteen shared identity attributes, encode the
/// categorical attributes numerically (binaries to 0/1, nominals one-hot),
/// and write a merged CSV with the Portuguese final grade as `g3_por`
/// (side information) and the Mathematics final grade as `g3_mat`
/// (evaluation label). Period grades G1/G2 are excluded from the features.
/// Returns the number of merged rows.
pub fn merge_student_csv(mat_path: &Path, por_path: &Path, out_path: &Path) -> Result<usize> {
    const JOIN_KEYS: [&str; 13] = [
        "school", "sex", "age", "address", "famsize", "Pstatus", "Medu", "Fedu", "Mjob", "Fjob",
        "reason", "nursery", "internet",
    ];
    const BINARY: [(&str, &str); 13] = [
        ("school", "GP"),
        ("sex", "F"),
        ("address", "U"),
        ("famsize", "LE3"),
        ("Pstatus", "T"),
        ("schoolsup", "no"),
        ("famsup", "no"),
        ("paid", "no"),
        ("activities", "no"),
        ("nursery", "no"),
        ("higher", "no"),
        ("internet", "no"),
        ("romantic", "no"),
    ];
    const NOMINAL: [(&str, &[&str]); 4] = [
        (
            "Mjob",
            &["teacher", "health", "services", "at_home", "other"],
        ),
        (
            "Fjob",
            &["teacher", "health", "services", "at_home", "other"],
        ),
        ("reason", &["home", "reputation", "course", "other"]),
        ("guardian", &["mother", "father", "other"]),
    ];
    const NUMERIC: [&str; 13] = [
        "age",
        "Medu",
        "Fedu",
        "traveltime",
        "studytime",
        "failures",
        "famrel",
        "freetime",
        "goout",
        "Dalc",
        "Walc",
        "health",
        "absences",
    ];

    let read_rows = |path: &Path| -> Result<(Vec<String>, Vec<Vec<String>>)> {
        let mut rdr = csv::ReaderBuilder::new()
            .delimiter(b';')
            .has_headers(true)
            .from_path(path)
            .map_err(|source| DataError::Csv {
                path: path.display().to_string(),
                source,
            })?;
        let headers: Vec<String> = rdr
            .headers()
            .map_err(|source| DataError::Csv {
                path: path.display().to_string(),
                source,
            })?
            .iter()
            .map(|h| h.trim().trim_matches('"').to_string())
            .collect();
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|source| DataError::Csv {
                path: path.display().to_string(),
                source,
            })?;
            rows.push(
                rec.iter()
                    .map(|c| c.trim().trim_matches('"').to_string())
                    .collect(),
            );
        }
        Ok((headers, rows))
    };
    let (mat_h, mat_rows) = read_rows(mat_path)?;
    let (por_h, por_rows) = read_rows(por_path)?;
    let col = |headers: &[String], name: &str, path: &Path| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DataError::MissingColumn(format!("{name} in {}", path.display())))
    };

    // index the Portuguese rows by join key
    let mut por_index = BTreeMap::new();
    let por_key_cols: Vec<usize> = JOIN_KEYS
        .iter()
        .map(|k| col(&por_h, k, por_path))
        .collect::<Result<_>>()?;
    let por_g3 = col(&por_h, "G3", por_path)?;
    for row in &por_rows {
        let key: Vec<String> = por_key_cols.iter().map(|&c| row[c].clone()).collect();
        por_index
            .entry(key)
            .or_insert_with(Vec::new)
            .push(row[por_g3].clone());
    }

    let mat_key_cols: Vec<usize> = JOIN_KEYS
        .iter()
        .map(|k| col(&mat_h, k, mat_path))
        .collect::<Result<_>>()?;
    let mat_g3 = col(&mat_h, "G3", mat_path)?;

    // output header
    let mut header: Vec<String> = Vec::new();
    for (name, _) in BINARY {
        header.push(name.to_string());
    }
    for name in NUMERIC {
        header.push(name.to_string());
    }
    for (name, values) in NOMINAL {
        for v in values {
            header.push(format!("{name}_{v}"));
        }
    }
    header.push("g3_por".into());
    header.push("g3_mat".into());

    let mut out = header.join(",");
    out.push('\n');
    let mut n_rows = 0usize;
    for row in &mat_rows {
        let key: Vec<String> = mat_key_cols.iter().map(|&c| row[c].clone()).collect();
        let Some(g3_pors) = por_index.get(&key) else {
            continue;
        };
        // ambiguous duplicate keys would create spurious matches
        if g3_pors.len() != 1 {
            continue;
        }
        let mut cells: Vec<String> = Vec::with_capacity(header.len());
        for (name, zero_value) in BINARY {
            let c = col(&mat_h, name, mat_path)?;
            cells.push(if row[c] == zero_value {
                "0".into()
            } else {
                "1".into()
            });
        }
        for name in NUMERIC {
            let c = col(&mat_h, name, mat_path)?;
            cells.push(row[c].clone());
        }
        for (name, values) in NOMINAL {
            let c = col(&mat_h, name, mat_path)?;
            for v in values {
                cells.push(if row[c] == *v { "1".into() } else { "0".into() });
            }
        }
        cells.push(g3_pors[0].clone());
        cells.push(row[mat_g3].clone());
        out.push_str(&cells.join(","));
        out.push('\n');
        n_rows += 1;
    }
    if n_rows == 0 {
        return Err(DataError::Invalid(
            "no students matched across the two files".into(),
        ));
    }
    std::fs::write(out_path, out).map_err(|source| DataError::Io {
        path: out_path.display().to_string(),
        source,
    })?;
    Ok(n_rows)
}
