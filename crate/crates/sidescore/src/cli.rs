//! Library-side implementations of the command-line verbs. The binary is a
//! thin argument parser over these functions; tests and examples call them
//! directly.
//!
//! Every command is idempotent for fixed inputs and seeds: the history
//! table, metrics files, embeddings, and plots are byte-identical across
//! reruns. Wall-clock timings are deliberately kept out of those files.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{manifest_toml, DataConfig, RunConfig};
use crate::data::{self, load_tabular_csv, Dataset, SideInfo, Standardizer, TabularSchema};
use crate::divergence::{
    geometric_interpolant, js_geo, js_geo_composed, js_geo_quadrature_1d, sqrt_js_geo,
    GaussianDiag, SkewParam,
};
use crate::eval::{align_score_order, cluster_accuracy, expected_ordinal, pca_project, pearson_r};
use crate::losses::{side_nll, SideObservation, SidePrediction};
use crate::model::{InputKind, ModelSpec, SideKind, TrainedModel};
use crate::nn::gradcheck::max_rel_error;
use crate::nn::Tape;
use crate::trainer::{self, TrainHistory};
use crate::triplets::quantile_bins;
use crate::{Error, Result};

// The sqrt skew-geometric JS is an exact metric on Gaussians sharing a
// common variance (it reduces to a scaled Euclidean distance on means),
// but it is *not* a metric once variances vary: along the variance
// direction it is superadditive at cubic order, so a few percent of
// random triples violate the triangle inequality in any nondegenerate
// variance band. The property checker verifies both facts.

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "SIDESCORE_OUT";

/// Resolve the output directory: explicit flag, else `SIDESCORE_OUT`,
/// else `./runs`.
pub fn resolve_out_dir(explicit: Option<&Path>) -> PathBuf {
    if let Some(p) = explicit {
        return p.to_path_buf();
    }
    if let Ok(v) = std::env::var(OUT_DIR_ENV) {
        if !v.is_empty() {
            return PathBuf::from(v);
        }
    }
    PathBuf::from("runs")
}

/// Train/test splits plus the input kind they imply. When the config
/// standardized tabular features, the fitted transform rides along so
/// override datasets can be mapped into the same space.
pub struct PreparedData {
    pub train: Dataset,
    pub test: Dataset,
    pub input_kind: InputKind,
    pub standardizer: Option<Standardizer>,
}

/// Verify a file against an expected hex sha-256 when one is configured.
fn check_sha256(path: &Path, expected: Option<&str>) -> Result<()> {
    let Some(expected) = expected else {
        return Ok(());
    };
    use sha2::{Digest, Sha256};
    let bytes = std::fs::read(path)?;
    let got = hex_digest(Sha256::digest(&bytes).as_slice());
    if !got.eq_ignore_ascii_case(expected.trim()) {
        return Err(Error::Data(data::DataError::Invalid(format!(
            "checksum mismatch for {}: expected {expected}, got {got}",
            path.display()
        ))));
    }
    Ok(())
}

fn hex_digest(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        let _ = write!(s, "{b:02x}");
    }
    s
}

/// Load, subset, split, and (for tabular sources) standardize per config.
pub fn prepare_data(cfg: &RunConfig) -> Result<PreparedData> {
    let (full, input_kind) = match &cfg.data {
        DataConfig::Blobs {
            n_per_class,
            n_classes,
            dim,
            spread,
        } => {
            let ds = data::make_blobs(*n_per_class, *n_classes, *dim, *spread, cfg.split.seed)?;
            (ds, InputKind::Tabular)
        }
        DataConfig::Idx {
            images,
            labels,
            side_map,
            limit,
            sha256_images,
            sha256_labels,
        } => {
            check_sha256(images, sha256_images.as_deref())?;
            check_sha256(labels, sha256_labels.as_deref())?;
            let mut ds = data::load_idx(images, labels)?;
            if let Some(limit) = limit {
                let take = (*limit).min(ds.n());
                let idx: Vec<usize> = (0..take).collect();
                ds = subset(&ds, &idx)?;
            }
            if let Some(map) = side_map {
                let labels: Vec<usize> = ds
                    .eval_labels()
                    .expect("idx loader always stores labels")
                    .values()
                    .iter()
                    .map(|&v| v as usize)
                    .collect();
                let side = data::side_map(&labels, map)?;
                ds = ds.with_side(side)?;
            }
            (ds, InputKind::Image28x28)
        }
        DataConfig::Csv {
            path,
            schema,
            sha256,
        } => {
            check_sha256(path, sha256.as_deref())?;
            let schema = TabularSchema::from_toml_file(schema)?;
            let (ds, report) = load_tabular_csv(path, &schema)?;
            log::info!(
                "loaded {} rows ({} dropped) with {} feature columns",
                report.rows_loaded,
                report.rows_dropped_missing,
                report.feature_columns.len()
            );
            (ds, InputKind::Tabular)
        }
    };
    let (mut train, mut test) = full.split(cfg.split.train_fraction, cfg.split.seed)?;
    let standardize = cfg.split.standardize && matches!(cfg.data, DataConfig::Csv { .. });
    let mut standardizer = None;
    if standardize {
        let std = Standardizer::fit(train.features());
        train = std.transform_dataset(&train);
        test = std.transform_dataset(&test);
        standardizer = Some(std);
    }
    Ok(PreparedData {
        train,
        test,
        input_kind,
        standardizer,
    })
}

fn subset(ds: &Dataset, idx: &[usize]) -> Result<Dataset> {
    // rebuild via split machinery to keep audit counters fresh
    let features = {
        let mut f = Array2::zeros((idx.len(), ds.n_features()));
        for (r, &i) in idx.iter().enumerate() {
            f.row_mut(r).assign(&ds.features().row(i));
        }
        f
    };
    let side = ds.side().map(|s| match s {
        SideInfo::Categorical { classes, n_classes } => SideInfo::Categorical {
            classes: idx.iter().map(|&i| classes[i]).collect(),
            n_classes: *n_classes,
        },
        SideInfo::Continuous(v) => SideInfo::Continuous(idx.iter().map(|&i| v[i]).collect()),
    });
    let eval = ds.eval_labels().map(|e| {
        let vals = e.values();
        idx.iter().map(|&i| vals[i]).collect::<Vec<f64>>()
    });
    Ok(Dataset::new(features, side, eval, ds.split_tag())?)
}

/// Derive the model spec from config and prepared data: the score-class
/// count defaults to the number of side classes when categorical, else 10.
pub fn model_spec_for(cfg: &RunConfig, prepared: &PreparedData) -> ModelSpec {
    let side_kind = match prepared.train.side() {
        Some(SideInfo::Categorical { n_classes, .. }) => SideKind::Categorical {
            n_classes: *n_classes,
        },
        Some(SideInfo::Continuous(_)) => SideKind::Continuous,
        None => SideKind::None,
    };
    let n_score_classes = cfg
        .model
        .n_score_classes
        .unwrap_or(match prepared.train.side() {
            Some(SideInfo::Categorical { n_classes, .. }) => *n_classes,
            _ => 10,
        });
    ModelSpec {
        input_kind: prepared.input_kind,
        input_dim: prepared.train.n_features(),
        latent_dim: cfg.model.latent_dim,
        hidden_layers: cfg.model.hidden_layers.clone(),
        n_score_classes,
        side_kind,
    }
}

/// Class-balanced, seed-deterministic reveal of `n_labeled` labels for the
/// semi-supervised variant. This intentionally reads evaluation labels at
/// *setup* time: the revealed subset becomes training signal by design.
pub fn select_labeled(
    train: &Dataset,
    n_labeled: usize,
    seed: u64,
    k: usize,
) -> Result<Vec<Option<usize>>> {
    let labels = train
        .eval_labels()
        .ok_or_else(|| Error::Msg("semi-supervised run needs labels in the dataset".into()))?
        .values();
    let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &l) in labels.iter().enumerate() {
        let c = l as usize;
        if c < k {
            buckets[c].push(i);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for b in &mut buckets {
        b.shuffle(&mut rng);
    }
    let mut out = vec![None; train.n()];
    let mut taken = 0usize;
    let mut round = 0usize;
    while taken < n_labeled {
        let mut advanced = false;
        for b in &buckets {
            if taken >= n_labeled {
                break;
            }
            if let Some(&i) = b.get(round) {
                out[i] = Some(labels[i] as usize);
                taken += 1;
                advanced = true;
            }
        }
        if !advanced {
            break; // fewer labels available than requested
        }
        round += 1;
    }
    Ok(out)
}

/// Artifacts of a training run.
#[derive(Debug)]
pub struct TrainOutputs {
    pub checkpoint: PathBuf,
    pub manifest: PathBuf,
    pub history: PathBuf,
    pub final_losses: Option<crate::losses::LossBreakdown>,
}

/// History table serialization (wall clock excluded so reruns are
/// byte-identical).
fn history_tsv(history: &TrainHistory) -> String {
    let with_ce = history.epochs.iter().any(|e| e.labeled_ce.is_some());
    let mut out = String::from("epoch\trecon\tprior_kl\ttriplet\tside\tscore\ttotal");
    if with_ce {
        out.push_str("\tlabeled_ce");
    }
    out.push('\n');
    for (i, e) in history.epochs.iter().enumerate() {
        let l = &e.losses;
        let _ = write!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            i, l.recon, l.prior_kl, l.triplet, l.side, l.score, l.total
        );
        if with_ce {
            let _ = write!(out, "\t{}", e.labeled_ce.unwrap_or(0.0));
        }
        out.push('\n');
    }
    out
}

/// Train per a config file; writes checkpoint, manifest, and history table.
pub fn cmd_train(
    config_path: &Path,
    out_dir: Option<&Path>,
    seed_override: Option<u64>,
) -> Result<TrainOutputs> {
    let mut cfg = RunConfig::from_toml_file(config_path)?;
    if let Some(seed) = seed_override {
        cfg.train.seed = seed;
    }
    let prepared = prepare_data(&cfg)?;
    let spec = model_spec_for(&cfg, &prepared);
    let tc = cfg.train_config();

    let (model, history) = match &cfg.semi {
        Some(semi) => {
            let labels = select_labeled(
                &prepared.train,
                semi.n_labeled,
                semi.label_seed,
                spec.n_score_classes,
            )?;
            trainer::train_semi_supervised(&spec, &prepared.train, &labels, &tc)?
        }
        None => trainer::train(&spec, &prepared.train, &tc)?,
    };

    let dir = resolve_out_dir(out_dir);
    std::fs::create_dir_all(&dir)?;
    let checkpoint = dir.join("checkpoint.ckpt");
    let manifest = dir.join("run_manifest.toml");
    let history_path = dir.join("history.tsv");
    model.save(&checkpoint)?;
    std::fs::write(&manifest, manifest_toml(&cfg)?)?;
    std::fs::write(&history_path, history_tsv(&history))?;
    Ok(TrainOutputs {
        checkpoint,
        manifest,
        history: history_path,
        final_losses: history.epochs.last().map(|e| e.losses),
    })
}

/// Everything the eval command reports. Every key appears exactly once in
/// the emitted files.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub score_cluster_accuracy: f64,
    pub aligned_pearson_r: f64,
    pub aligned_pearson_p: f64,
    pub raw_abs_pearson_r: f64,
    pub side_holdout_accuracy: Option<f64>,
    pub side_holdout_r: Option<f64>,
    pub side_holdout_nll: Option<f64>,
    pub n_test: usize,
}

impl EvalReport {
    fn lines(&self) -> Vec<(String, String)> {
        let mut out = vec![
            ("n_test".into(), self.n_test.to_string()),
            (
                "score_cluster_accuracy".into(),
                self.score_cluster_accuracy.to_string(),
            ),
            (
                "aligned_pearson_r".into(),
                self.aligned_pearson_r.to_string(),
            ),
            (
                "aligned_pearson_p".into(),
                self.aligned_pearson_p.to_string(),
            ),
            (
                "raw_abs_pearson_r".into(),
                self.raw_abs_pearson_r.to_string(),
            ),
        ];
        if let Some(v) = self.side_holdout_accuracy {
            out.push(("side_holdout_accuracy".into(), v.to_string()));
        }
        if let Some(v) = self.side_holdout_r {
            out.push(("side_holdout_r".into(), v.to_string()));
        }
        if let Some(v) = self.side_holdout_nll {
            out.push(("side_holdout_nll".into(), v.to_string()));
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.lines() {
            let _ = writeln!(s, "{k}: {v}");
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        for (k, v) in self.lines() {
            let _ = writeln!(s, "{k},{v}");
        }
        s
    }
}

/// Turn held-out targets into classes for the assignment-matched accuracy.
/// Targets that already look like class ids (nonnegative integers with at
/// most `k` distinct values) are used as-is; anything else — continuous
/// values, and integer grades finer than the score head — is
/// quantile-binned into `k` classes (ties to the lower bin).
fn eval_classes(values: &[f64], k: usize) -> Result<Vec<usize>> {
    let distinct = {
        let mut s: Vec<u64> = values.iter().map(|v| v.to_bits()).collect();
        s.sort_unstable();
        s.dedup();
        s.len()
    };
    let class_like = distinct <= k
        && values
            .iter()
            .all(|v| v.fract() == 0.0 && *v >= 0.0 && *v < 1e6);
    if class_like {
        return Ok(values.iter().map(|&v| v as usize).collect());
    }
    let bins = k.min(distinct);
    quantile_bins(values, bins).map_err(Error::Triplet)
}


/// Evaluate a checkpoint on the config's held-out split (or an explicit
/// CSV override). Writes `metrics.txt` and `metrics.csv`.
pub fn cmd_eval(
    checkpoint: &Path,
    config_path: &Path,
    data_override: Option<(&Path, &Path)>,
    out_dir: Option<&Path>,
) -> Result<(EvalReport, PathBuf)> {
    let model = TrainedModel::load(checkpoint)?;
    let cfg = RunConfig::from_toml_file(config_path)?;
    let prepared = prepare_data(&cfg)?;
    let (train, test) = match data_override {
        Some((data_path, schema_path)) => {
            let schema = TabularSchema::from_toml_file(schema_path)?;
            let (mut ds, _) = load_tabular_csv(data_path, &schema)?;
            // override rows must live in the same feature space as training
            if let Some(std) = &prepared.standardizer {
                ds = std.transform_dataset(&ds);
            }
            (prepared.train, ds)
        }
        None => (prepared.train, prepared.test),
    };
    let report = evaluate_model(&model, &train, &test)?;
    let dir = resolve_out_dir(out_dir);
    std::fs::create_dir_all(&dir)?;
    let txt = dir.join("metrics.txt");
    std::fs::write(&txt, report.to_text())?;
    std::fs::write(dir.join("metrics.csv"), report.to_csv())?;
    Ok((report, txt))
}

/// Core of the eval command, reusable from tests and the acceptance suite.
/// Needs the training split only for the score-alignment reference (side
/// information); evaluation labels are read from the test split.
pub fn evaluate_model(model: &TrainedModel, train: &Dataset, test: &Dataset) -> Result<EvalReport> {
    if test.n() == 0 {
        return Err(Error::Data(data::DataError::Invalid(
            "empty test split".into(),
        )));
    }
    let eval_values: Vec<f64> = test
        .eval_labels()
        .ok_or_else(|| Error::Data(data::DataError::Invalid("missing eval labels".into())))?
        .values()
        .to_vec();
    let k = model.spec().n_score_classes;

    // score distributions at the posterior mean
    let test_mu = model.embed_batch(test.features())?;
    let test_dists = model.predict_score_batch(&test_mu)?;
    let hard: Vec<usize> = test_dists.iter().map(|d| d.hard_class()).collect();

    let truth = eval_classes(&eval_values, k)?;
    let score_cluster_accuracy = cluster_accuracy(&hard, &truth)?;

    // alignment reference: training-split side information only
    let train_mu = model.embed_batch(train.features())?;
    let train_dists = model.predict_score_batch(&train_mu)?;
    let train_hard: Vec<usize> = train_dists.iter().map(|d| d.hard_class()).collect();
    let reference: Vec<f64> = match train.side() {
        Some(SideInfo::Continuous(v)) => v.clone(),
        Some(SideInfo::Categorical { classes, .. }) => classes.iter().map(|&c| c as f64).collect(),
        None => train_hard.iter().map(|&c| c as f64).collect(), // degenerate fallback
    };
    let ordinal = align_score_order(&train_hard, &reference, k).map_err(Error::Eval)?;
    let aligned: Vec<f64> = test_dists
        .iter()
        .map(|d| expected_ordinal(d.probs(), &ordinal))
        .collect();
    let (aligned_pearson_r, aligned_pearson_p) = match pearson_r(&aligned, &eval_values) {
        Ok(v) => v,
        Err(crate::eval::EvalError::ZeroVariance(_)) => (0.0, 1.0),
        Err(e) => return Err(Error::Eval(e)),
    };
    let raw: Vec<f64> = test_dists
        .iter()
        .map(|d| {
            d.probs()
                .iter()
                .enumerate()
                .map(|(i, p)| i as f64 * p)
                .sum()
        })
        .collect();
    let raw_abs_pearson_r = match pearson_r(&raw, &eval_values) {
        Ok((r, _)) => r.abs(),
        Err(crate::eval::EvalError::ZeroVariance(_)) => 0.0,
        Err(e) => return Err(Error::Eval(e)),
    };

    // held-out side prediction quality
    let mut side_holdout_accuracy = None;
    let mut side_holdout_r = None;
    let mut side_holdout_nll = None;
    if !matches!(model.spec().side_kind, SideKind::None) {
        if let Some(side) = test.side() {
            let preds = model.predict_side_batch(&test_mu)?;
            match side {
                SideInfo::Categorical { classes, .. } => {
                    let mut correct = 0usize;
                    let mut nll = 0.0;
                    for (p, &c) in preds.iter().zip(classes) {
                        if let SidePrediction::Categorical(probs) = p {
                            let arg = probs
                                .iter()
                                .enumerate()
                                .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite"))
                                .map(|(i, _)| i)
                                .unwrap_or(0);
                            if arg == c {
                                correct += 1;
                            }
                        }
                        nll += side_nll(p, &SideObservation::Class(c)).map_err(Error::Loss)?;
                    }
                    side_holdout_accuracy = Some(correct as f64 / preds.len() as f64);
                    side_holdout_nll = Some(nll / preds.len() as f64);
                }
                SideInfo::Continuous(values) => {
                    let means: Vec<f64> = preds
                        .iter()
                        .map(|p| match p {
                            SidePrediction::Continuous { mean, .. } => *mean,
                            _ => 0.0,
                        })
                        .collect();
                    let mut nll = 0.0;
                    for (p, &v) in preds.iter().zip(values) {
                        nll += side_nll(p, &SideObservation::Value(v)).map_err(Error::Loss)?;
                    }
                    side_holdout_nll = Some(nll / preds.len() as f64);
                    side_holdout_r = match pearson_r(&means, values) {
                        Ok((r, _)) => Some(r),
                        Err(_) => None,
                    };
                }
            }
        }
    }

    Ok(EvalReport {
        score_cluster_accuracy,
        aligned_pearson_r,
        aligned_pearson_p,
        raw_abs_pearson_r,
        side_holdout_accuracy,
        side_holdout_r,
        side_holdout_nll,
        n_test: test.n(),
    })
}

/// Columns the embed command can append beyond id + mean + variance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExtraColumn {
    Side,
    Label,
    Score,
    InferredSide,
}

impl ExtraColumn {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "side" => Ok(Self::Side),
            "label" => Ok(Self::Label),
            "score" => Ok(Self::Score),
            "inferred_side" => Ok(Self::InferredSide),
            other => Err(Error::Msg(format!("unknown embed column '{other}'"))),
        }
    }
}

/// Write posterior means and variances (and any requested extras) for the
/// config's held-out split, one row per instance:
/// `id, mu_0..mu_{d-1}, var_0..var_{d-1}[, extras]`.
pub fn cmd_embed(
    checkpoint: &Path,
    config_path: &Path,
    data_override: Option<(&Path, &Path)>,
    out_file: &Path,
    extras: &[ExtraColumn],
) -> Result<PathBuf> {
    let model = TrainedModel::load(checkpoint)?;
    let cfg = RunConfig::from_toml_file(config_path)?;
    let ds = match data_override {
        Some((data_path, schema_path)) => {
            let schema = TabularSchema::from_toml_file(schema_path)?;
            let (raw, _) = load_tabular_csv(data_path, &schema)?;
            match prepare_data(&cfg)?.standardizer {
                Some(std) => std.transform_dataset(&raw),
                None => raw,
            }
        }
        None => {
            let prepared = prepare_data(&cfg)?;
            if prepared.test.n() > 0 {
                prepared.test
            } else {
                log::warn!("test split empty; embedding the training split");
                prepared.train
            }
        }
    };
    let (mu, var) = model.encode_arrays(ds.features())?;
    let d = model.spec().latent_dim;

    let mut header = String::from("id");
    for j in 0..d {
        let _ = write!(header, ",mu_{j}");
    }
    for j in 0..d {
        let _ = write!(header, ",var_{j}");
    }
    let score = if extras.contains(&ExtraColumn::Score) {
        Some(model.predict_score_batch(&mu)?)
    } else {
        None
    };
    let inferred_side = if extras.contains(&ExtraColumn::InferredSide) {
        Some(model.predict_side_batch(&mu)?)
    } else {
        None
    };
    for e in extras {
        match e {
            ExtraColumn::Side => header.push_str(",side"),
            ExtraColumn::Label => header.push_str(",label"),
            ExtraColumn::Score => header.push_str(",score"),
            ExtraColumn::InferredSide => header.push_str(",inferred_side"),
        }
    }
    let mut out = header;
    out.push('\n');
    for i in 0..ds.n() {
        let _ = write!(out, "{i}");
        for j in 0..d {
            let _ = write!(out, ",{}", mu[(i, j)]);
        }
        for j in 0..d {
            let _ = write!(out, ",{}", var[(i, j)]);
        }
        for e in extras {
            match e {
                ExtraColumn::Side => {
                    let v = match ds.side() {
                        Some(SideInfo::Categorical { classes, .. }) => classes[i] as f64,
                        Some(SideInfo::Continuous(vals)) => vals[i],
                        None => f64::NAN,
                    };
                    let _ = write!(out, ",{v}");
                }
                ExtraColumn::Label => {
                    let v = ds.eval_labels().map_or(f64::NAN, |e| e.values()[i]);
                    let _ = write!(out, ",{v}");
                }
                ExtraColumn::Score => {
                    let v = score.as_ref().expect("computed above")[i].hard_class();
                    let _ = write!(out, ",{v}");
                }
                ExtraColumn::InferredSide => {
                    let v = match &inferred_side.as_ref().expect("computed above")[i] {
                        SidePrediction::Categorical(p) => {
                            p.iter()
                                .enumerate()
                                .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite"))
                                .map(|(c, _)| c)
                                .unwrap_or(0) as f64
                        }
                        SidePrediction::Continuous { mean, .. } => *mean,
                    };
                    let _ = write!(out, ",{v}");
                }
            }
        }
        out.push('\n');
    }
    if let Some(parent) = out_file.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(out_file, out)?;
    Ok(out_file.to_path_buf())
}

/// PCA-project an embeddings file to 2-D and scatter it colored by the
/// chosen column. Unknown color columns are a config error.
pub fn cmd_plot_latent(
    embeddings_file: &Path,
    color_by: &str,
    out_image: &Path,
) -> Result<PathBuf> {
    let text = std::fs::read_to_string(embeddings_file)?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| {
            Error::Data(data::DataError::EmptyFile(
                embeddings_file.display().to_string(),
            ))
        })?
        .split(',')
        .collect();
    let mu_cols: Vec<usize> = header
        .iter()
        .enumerate()
        .filter(|(_, h)| h.starts_with("mu_"))
        .map(|(i, _)| i)
        .collect();
    if mu_cols.is_empty() {
        return Err(Error::Data(data::DataError::Invalid(
            "embeddings file has no mu_* columns".into(),
        )));
    }
    let color_col = header.iter().position(|h| *h == color_by).ok_or_else(|| {
        Error::Config(crate::config::ConfigError::Invalid(format!(
            "unknown color column '{color_by}'"
        )))
    })?;

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut colors: Vec<f64> = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        let mut row = Vec::with_capacity(mu_cols.len());
        for &c in &mu_cols {
            row.push(cells[c].parse::<f64>().map_err(|_| {
                Error::Data(data::DataError::Invalid(format!(
                    "bad number '{}'",
                    cells[c]
                )))
            })?);
        }
        colors.push(cells[color_col].parse::<f64>().map_err(|_| {
            Error::Data(data::DataError::Invalid(format!(
                "bad color value '{}'",
                cells[color_col]
            )))
        })?);
        rows.push(row);
    }
    let n = rows.len();
    let d = mu_cols.len();
    let mat = Array2::from_shape_fn((n, d), |(i, j)| rows[i][j]);
    let proj = if d == 2 {
        mat
    } else {
        pca_project(&mat, 2).map_err(Error::Eval)?.points
    };

    let distinct: std::collections::BTreeSet<u64> = colors.iter().map(|v| v.to_bits()).collect();
    let all_integral = colors.iter().all(|v| v.fract() == 0.0 && *v >= 0.0);
    let spec = if all_integral && distinct.len() <= 10 {
        crate::plot::ColorSpec::Categorical(colors.iter().map(|&v| v as usize).collect())
    } else {
        crate::plot::ColorSpec::Continuous(colors)
    };
    if let Some(parent) = out_image.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    crate::plot::scatter(&proj, &spec, out_image)?;
    Ok(out_image.to_path_buf())
}

/// One property line of the divergence check report.
#[derive(Debug, Clone)]
pub struct PropertyResult {
    pub name: &'static str,
    pub pass: bool,
    pub worst: f64,
    pub detail: String,
}

#[derive(Debug, Clone)]
pub struct DivcheckReport {
    pub properties: Vec<PropertyResult>,
}

impl DivcheckReport {
    pub fn all_pass(&self) -> bool {
        self.properties.iter().all(|p| p.pass)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for p in &self.properties {
            let _ = writeln!(
                s,
                "{} {:<28} worst {:>12.3e}  {}",
                if p.pass { "PASS" } else { "FAIL" },
                p.name,
                p.worst,
                p.detail
            );
        }
        s
    }
}

fn random_gaussian(rng: &mut ChaCha8Rng, d: usize, var_band: (f64, f64)) -> GaussianDiag {
    let mean = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let var = (0..d)
        .map(|_| rng.gen_range(var_band.0..var_band.1))
        .collect();
    GaussianDiag::new(mean, var).expect("valid parameters")
}

/// Deliberately wrong interpolant: drops the covariance factor on the
/// interpolated mean. Used as a negative control so the endpoint property
/// demonstrably catches the mistake.
fn broken_mean_interpolant(p: &GaussianDiag, q: &GaussianDiag, lam: f64) -> GaussianDiag {
    let d = p.dim();
    let mut mean = Vec::with_capacity(d);
    let mut var = Vec::with_capacity(d);
    for i in 0..d {
        let prec = (1.0 - lam) / p.var()[i] + lam / q.var()[i];
        var.push(1.0 / prec);
        mean.push((1.0 - lam) * p.mean()[i] / p.var()[i] + lam * q.mean()[i] / q.var()[i]);
    }
    GaussianDiag::new(mean, var).expect("valid parameters")
}

/// Run the divergence property suites: metric axioms at lambda = 0.5,
/// dual-route agreement, the quadrature oracle, endpoint recovery, and
/// gradient checks. `inject_broken_mean` swaps in the negative-control
/// interpolant, which must fail the endpoint property.
pub fn cmd_divcheck(n_trials: usize, seed: u64, inject_broken_mean: bool) -> DivcheckReport {
    let mut props = Vec::new();
    let dims = [1usize, 2, 8];
    let sym = SkewParam::symmetric();

    // non-negativity
    {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst = 0.0f64;
        for i in 0..n_trials {
            let d = dims[i % dims.len()];
            let p = random_gaussian(&mut rng, d, (0.1, 4.0));
            let q = random_gaussian(&mut rng, d, (0.1, 4.0));
            let lam = SkewParam::new(rng.gen_range(0.0..1.0)).expect("in range");
            let v = js_geo(&p, &q, lam).expect("same dims");
            worst = worst.min(v);
        }
        props.push(PropertyResult {
            name: "non_negativity",
            pass: worst >= 0.0,
            worst,
            detail: format!("{n_trials} random pairs"),
        });
    }

    // identity of indiscernibles: exact zero at equality, positive apart
    {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
        let mut worst_eq = 0.0f64;
        let mut min_apart = f64::INFINITY;
        for i in 0..n_trials {
            let d = dims[i % dims.len()];
            let p = random_gaussian(&mut rng, d, (0.1, 4.0));
            worst_eq = worst_eq.max(js_geo(&p, &p, sym).expect("same dims"));
            let mut mean2 = p.mean().to_vec();
            mean2[0] += 1e-3;
            let q = GaussianDiag::new(mean2, p.var().to_vec()).expect("valid");
            min_apart = min_apart.min(sqrt_js_geo(&p, &q, sym).expect("same dims"));
        }
        props.push(PropertyResult {
            name: "identity_of_indiscernibles",
            pass: worst_eq == 0.0 && min_apart > 0.0,
            worst: worst_eq.max(if min_apart > 0.0 { 0.0 } else { 1.0 }),
            detail: format!("min separated distance {min_apart:.3e}"),
        });
    }

    // swap symmetry
    {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(2));
        let mut worst = 0.0f64;
        for i in 0..n_trials {
            let d = dims[i % dims.len()];
            let p = random_gaussian(&mut rng, d, (0.1, 4.0));
            let q = random_gaussian(&mut rng, d, (0.1, 4.0));
            let lam: f64 = rng.gen_range(0.0..1.0);
            let a = js_geo(&p, &q, SkewParam::new(lam).expect("in range")).expect("same dims");
            let b =
                js_geo(&q, &p, SkewParam::new(1.0 - lam).expect("in range")).expect("same dims");
            worst = worst.max((a - b).abs());
        }
        props.push(PropertyResult {
            name: "swap_symmetry",
            pass: worst <= 1e-9,
            worst,
            detail: "js(p,q,l) vs js(q,p,1-l)".into(),
        });
    }

    // closed form vs two-KL composition
    {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(3));
        let mut worst = 0.0f64;
        for i in 0..n_trials {
            let d = dims[i % dims.len()];
            let p = random_gaussian(&mut rng, d, (0.1, 4.0));
            let q = random_gaussian(&mut rng, d, (0.1, 4.0));
            let lam = SkewParam::new(rng.gen_range(0.0..1.0)).expect("in range");
            let a = js_geo(&p, &q, lam).expect("same dims");
            let b = js_geo_composed(&p, &q, lam).expect("same dims");
            worst = worst.max((a - b).abs());
        }
        props.push(PropertyResult {
            name: "closed_vs_composed",
            pass: worst <= 1e-9,
            worst,
            detail: "single expression vs (1-l)KL + lKL".into(),
        });
    }

    // quadrature oracle agreement in one dimension
    {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(4));
        let trials = n_trials.clamp(100, 500);
        let mut worst = 0.0f64;
        for _ in 0..trials {
            let p = random_gaussian(&mut rng, 1, (0.3, 3.0));
            let q = random_gaussian(&mut rng, 1, (0.3, 3.0));
            let lam = SkewParam::new(rng.gen_range(0.05..0.95)).expect("in range");
            let a = js_geo(&p, &q, lam).expect("same dims");
            let b = js_geo_quadrature_1d(&p, &q, lam, 4001).expect("dimension 1");
            worst = worst.max((a - b).abs());
        }
        props.push(PropertyResult {
            name: "quadrature_agreement",
            pass: worst <= 1e-5,
            worst,
            detail: format!("{trials} univariate pairs, Simpson 4001 points"),
        });
    }

    // endpoint recovery of the interpolant (negative control target)
    {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(5));
        let mut worst = 0.0f64;
        for i in 0..n_trials.min(1000) {
            let d = dims[i % dims.len()];
            let p = random_gaussian(&mut rng, d, (0.1, 4.0));
            let q = random_gaussian(&mut rng, d, (0.1, 4.0));
            for lam in [0.0, 1.0] {
                let target = if lam == 0.0 { &p } else { &q };
                let interp = if inject_broken_mean {
                    broken_mean_interpolant(&p, &q, lam)
                } else {
                    geometric_interpolant(&p, &q, SkewParam::new(lam).expect("in range"))
                        .expect("same dims")
                };
                let err = interp
                    .mean()
                    .iter()
                    .zip(target.mean())
                    .map(|(a, b)| (a - b).abs())
                    .chain(
                        interp
                            .var()
                            .iter()
                            .zip(target.var())
                            .map(|(a, b)| (a - b).abs()),
                    )
                    .fold(0.0f64, f64::max);
                worst = worst.max(err);
            }
        }
        props.push(PropertyResult {
            name: "interpolant_endpoints",
            pass: worst == 0.0,
            worst,
            detail: if inject_broken_mean {
                "negative control: unscaled-mean interpolant".into()
            } else {
                "lambda 0/1 return the inputs exactly".into()
            },
        });
    }

    // triangle inequality at lambda = 0.5 on fixed-variance triples,
    // where the distance reduces to a scaled Euclidean metric on means
    {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(6));
        let trials = n_trials.max(10_000);
        let mut worst = f64::NEG_INFINITY;
        for i in 0..trials {
            let d = dims[i % dims.len()];
            let v: f64 = rng.gen_range(0.2..3.0);
            let gen_fixed = |rng: &mut ChaCha8Rng| {
                let mean = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
                GaussianDiag::new(mean, vec![v; d]).expect("valid parameters")
            };
            let a = gen_fixed(&mut rng);
            let b = gen_fixed(&mut rng);
            let c = gen_fixed(&mut rng);
            let dab = sqrt_js_geo(&a, &b, sym).expect("same dims");
            let dbc = sqrt_js_geo(&b, &c, sym).expect("same dims");
            let dac = sqrt_js_geo(&a, &c, sym).expect("same dims");
            worst = worst.max(dac - (dab + dbc));
        }
        props.push(PropertyResult {
            name: "triangle_fixed_variance",
            pass: worst <= 1e-9,
            worst,
            detail: format!("{trials} shared-variance triples"),
        });
    }

    // non-metricity on varying variances: the violation must reproduce.
    // Along the variance direction the distance is superadditive, so the
    // unrestricted triangle inequality is false; this pins the fact.
    {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(8));
        let trials = n_trials.max(10_000);
        let mut violations = 0usize;
        let mut worst = f64::NEG_INFINITY;
        for i in 0..trials {
            let d = dims[i % dims.len()];
            let a = random_gaussian(&mut rng, d, (0.5, 2.0));
            let b = random_gaussian(&mut rng, d, (0.5, 2.0));
            let c = random_gaussian(&mut rng, d, (0.5, 2.0));
            let dab = sqrt_js_geo(&a, &b, sym).expect("same dims");
            let dbc = sqrt_js_geo(&b, &c, sym).expect("same dims");
            let dac = sqrt_js_geo(&a, &c, sym).expect("same dims");
            let gap = dac - (dab + dbc);
            if gap > 1e-9 {
                violations += 1;
            }
            worst = worst.max(gap);
        }
        props.push(PropertyResult {
            name: "triangle_violation_exists",
            pass: violations > 0,
            worst,
            detail: format!(
                "{violations}/{trials} varying-variance triples violate; not a metric there"
            ),
        });
    }

    // differentiability: tape gradient vs central finite differences
    {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(7));
        let points = n_trials.clamp(10, 50);
        let mut worst = 0.0f64;
        for _ in 0..points {
            let d = 3usize;
            let lam: f64 = rng.gen_range(0.1..0.9);
            let packed = Array2::from_shape_fn((2, 2 * d), |(i, j)| {
                if j < d {
                    rng.gen_range(-2.0..2.0)
                } else {
                    let _ = i;
                    rng.gen_range(0.3..2.5)
                }
            });
            let run = |x: &Array2<f64>| {
                let mu = x.slice(ndarray::s![.., 0..d]).to_owned();
                let var = x.slice(ndarray::s![.., d..2 * d]).to_owned();
                let mut t = Tape::new();
                let muv = t.param(mu);
                let varv = t.param(var);
                let mu1 = t.gather_rows(muv, &[0]);
                let var1 = t.gather_rows(varv, &[0]);
                let mu2 = t.gather_rows(muv, &[1]);
                let var2 = t.gather_rows(varv, &[1]);
                let js = crate::losses::graph::js_geo_rows_graph(&mut t, mu1, var1, mu2, var2, lam);
                let out = t.sum_all(js);
                (t, muv, varv, out)
            };
            let err = max_rel_error(
                &packed,
                1e-5,
                1e-6,
                |x| {
                    let (t, _, _, out) = run(x);
                    t.scalar_value(out)
                },
                |x| {
                    let (mut t, muv, varv, out) = run(x);
                    t.backward(out);
                    ndarray::concatenate(
                        ndarray::Axis(1),
                        &[t.grad(muv).view(), t.grad(varv).view()],
                    )
                    .expect("same rows")
                },
            );
            worst = worst.max(err);
        }
        props.push(PropertyResult {
            name: "gradient_check",
            pass: worst <= 1e-4,
            worst,
            detail: format!("{points} random points, central differences 1e-5"),
        });
    }

    DivcheckReport { properties: props }
}
