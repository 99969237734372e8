//! The optimization loop combining all loss branches.
//!
//! One latent sample per instance per step (reparameterized), Adam with
//! default learning rate 1e-3, epoch-level shuffling driven by the run
//! seed. All randomness flows from `TrainConfig::seed` through fixed
//! ChaCha streams, so a rerun with the same config reproduces the history
//! bitwise on the same platform.
//!
//! Epoch records keep the exact accounting invariant: the recorded total
//! is recomputed as the weighted sum of the recorded per-epoch component
//! means, never averaged separately. The semi-supervised cross-entropy is
//! reported alongside the five-component breakdown, not folded into it.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Dataset, SideInfo};
use crate::losses::{self, LossBreakdown, LossParts, LossWeights, TripletReduction};
use crate::model::{ModelSpec, SideGraphOut, TrainedModel};
use crate::nn::{Adam, Graph, Var};
use crate::triplets::{self, Augmentation, Triplet, TripletError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite {component} loss at epoch {epoch}")]
    NonFinite { component: String, epoch: usize },
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Loss(#[from] crate::losses::LossError),
    #[error(transparent)]
    Triplet(#[from] TripletError),
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
}

type Result<T> = std::result::Result<T, TrainError>;

/// How triplets are mined during training.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TripletRegime {
    /// categorical side info: positives share the anchor's side class
    ByClass,
    /// continuous side info: quantile-bin, then mine by bin
    ByQuantile { n_bins: usize },
    /// positives are augmented copies; `jitter` scales feature noise for
    /// tabular inputs, `pixel_shift` bounds the shift for images
    SelfSupervised { jitter: f64, pixel_shift: usize },
    /// no triplet term
    #[default]
    Off,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub weights: LossWeights,
    pub triplet_regime: TripletRegime,
    /// triplets mined per batch; defaults to the batch size
    pub triplets_per_batch: Option<usize>,
    pub triplet_reduction: TripletReduction,
    /// weight of the semi-supervised cross-entropy over labeled instances
    pub labeled_weight: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 64,
            learning_rate: 1e-3,
            seed: 0,
            weights: LossWeights::default(),
            triplet_regime: TripletRegime::Off,
            triplets_per_batch: None,
            triplet_reduction: TripletReduction::Sum,
            labeled_weight: None,
        }
    }
}

impl TrainConfig {
    fn validate(&self, spec: &ModelSpec, data: &Dataset) -> Result<()> {
        if self.epochs == 0 {
            return Err(TrainError::Config("epochs must be >= 1".into()));
        }
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return Err(TrainError::Config(format!(
                "bad learning rate {}",
                self.learning_rate
            )));
        }
        self.weights.validate()?;
        let triplets_active =
            self.weights.gamma > 0.0 && !matches!(self.triplet_regime, TripletRegime::Off);
        if triplets_active && self.batch_size < 2 {
            return Err(TrainError::Config(
                "batch_size must be >= 2 with triplets active".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be positive".into()));
        }
        if data.n_features() != spec.input_dim {
            return Err(TrainError::Config(format!(
                "data has {} features but the model expects {}",
                data.n_features(),
                spec.input_dim
            )));
        }
        if self.weights.delta > 0.0 && data.side().is_none() {
            return Err(TrainError::Config(
                "side weight delta > 0 but the dataset has no side information".into(),
            ));
        }
        match (&self.triplet_regime, data.side()) {
            (TripletRegime::ByClass, Some(SideInfo::Continuous(_))) if self.weights.gamma > 0.0 => {
                return Err(TrainError::Config(
                    "by_class mining needs categorical side information".into(),
                ));
            }
            (TripletRegime::ByClass, None) if self.weights.gamma > 0.0 => {
                return Err(TrainError::Config(
                    "by_class mining needs side information".into(),
                ));
            }
            (TripletRegime::ByQuantile { .. }, Some(SideInfo::Categorical { .. }))
                if self.weights.gamma > 0.0 =>
            {
                return Err(TrainError::Config(
                    "by_quantile mining needs continuous side information".into(),
                ));
            }
            (TripletRegime::ByQuantile { .. }, None) if self.weights.gamma > 0.0 => {
                return Err(TrainError::Config(
                    "by_quantile mining needs side information".into(),
                ));
            }
            _ => {}
        }
        Ok(())
    }
}

/// One completed epoch: component means, the exact weighted total, the
/// semi-supervised cross-entropy when present, and wall-clock time. The
/// wall clock is excluded from the persisted history table so reruns
/// remain byte-identical.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub losses: LossBreakdown,
    pub labeled_ce: Option<f64>,
    pub wall_secs: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn last_total(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.losses.total)
    }
}

/// Term nodes of one step graph; `objective` is the optimized scalar.
pub struct StepTerms {
    pub recon: Option<Var>,
    pub prior: Option<Var>,
    pub triplet: Option<Var>,
    pub side: Option<Var>,
    pub score: Option<Var>,
    pub labeled_ce: Option<Var>,
    pub objective: Var,
}

/// Assemble the full objective for one batch. `x` holds the batch rows,
/// with any augmented views appended after row `n_batch`; `triplets`
/// index into all of `x`; `labeled` pairs batch-row indices with classes.
/// Terms whose weight is zero are skipped entirely, so their parameters
/// receive no gradient and stay bitwise unchanged.
#[allow(clippy::too_many_arguments)]
pub fn build_step_graph<'a>(
    model: &'a TrainedModel,
    x: &Array2<f64>,
    n_batch: usize,
    noise: &Array2<f64>,
    side: Option<&[usize]>,
    side_values: Option<&[f64]>,
    triplets: &[Triplet],
    labeled: &[(usize, usize)],
    labeled_weight: f64,
    reduction: TripletReduction,
) -> Result<(Graph<'a>, StepTerms)> {
    let w = *model.weights();
    let mut g = Graph::trainable(&model.store);
    let xv = g.tape.constant(x.clone());
    let (mu_all, var_all) = model.encode_graph(&mut g, xv);

    // posterior rows belonging to the real batch
    let (mu, var) = if x.nrows() == n_batch {
        (mu_all, var_all)
    } else {
        let idx: Vec<usize> = (0..n_batch).collect();
        (
            g.tape.gather_rows(mu_all, &idx),
            g.tape.gather_rows(var_all, &idx),
        )
    };

    // one reparameterized sample per instance
    let eps = g.tape.constant(noise.clone());
    let sd = g.tape.sqrt(var);
    let scaled = g.tape.mul(sd, eps);
    let z = g.tape.add(mu, scaled);

    let batch_x = if x.nrows() == n_batch {
        x.clone()
    } else {
        let mut b = Array2::zeros((n_batch, x.ncols()));
        for i in 0..n_batch {
            b.row_mut(i).assign(&x.row(i));
        }
        b
    };

    let mut recon_t = None;
    let mut prior_t = None;
    let mut triplet_t = None;
    let mut side_t = None;
    let mut score_t = None;
    let mut labeled_ce_t = None;
    let mut weighted: Vec<Var> = Vec::new();

    if w.alpha > 0.0 {
        let out = model.decode_graph(&mut g, z);
        let recon = match model.spec().likelihood() {
            losses::Likelihood::Bernoulli => {
                losses::graph::bernoulli_nll_from_logits(&mut g.tape, out, &batch_x)
            }
            losses::Likelihood::GaussianUnitVar => {
                losses::graph::gaussian_unit_var_nll(&mut g.tape, out, &batch_x)
            }
        };
        recon_t = Some(recon);
        weighted.push(g.tape.scale(recon, w.alpha));
    }
    if w.beta > 0.0 {
        let prior = losses::graph::prior_kl_graph(&mut g.tape, mu, var);
        prior_t = Some(prior);
        weighted.push(g.tape.scale(prior, w.beta));
    }
    if w.gamma > 0.0 && !triplets.is_empty() {
        let trip = losses::graph::triplet_graph(
            &mut g.tape,
            mu_all,
            var_all,
            triplets,
            w.lambda_skew,
            w.margin,
            reduction,
        );
        triplet_t = Some(trip);
        weighted.push(g.tape.scale(trip, w.gamma));
    }
    if w.delta > 0.0 {
        let side_out = model.side_graph(&mut g, z)?;
        let side_term = match side_out {
            SideGraphOut::Categorical(logits) => {
                let classes = side.ok_or_else(|| {
                    TrainError::Config("categorical side head without side classes".into())
                })?;
                losses::graph::categorical_ce_graph(&mut g.tape, logits, classes)
            }
            SideGraphOut::Continuous { mean, var } => {
                let values = side_values.ok_or_else(|| {
                    TrainError::Config("continuous side head without side values".into())
                })?;
                let obs = Array2::from_shape_vec((values.len(), 1), values.to_vec())
                    .expect("column vector");
                losses::graph::gaussian_side_nll_graph(&mut g.tape, mean, var, &obs)
            }
        };
        side_t = Some(side_term);
        weighted.push(g.tape.scale(side_term, w.delta));
    }
    let needs_score_logits = w.zeta > 0.0 || (labeled_weight > 0.0 && !labeled.is_empty());
    if needs_score_logits {
        let logits = model.score_logits_graph(&mut g, z);
        if w.zeta > 0.0 {
            let score = losses::graph::score_mi_graph(&mut g.tape, logits);
            score_t = Some(score);
            weighted.push(g.tape.scale(score, w.zeta));
        }
        if labeled_weight > 0.0 && !labeled.is_empty() {
            let rows: Vec<usize> = labeled.iter().map(|(r, _)| *r).collect();
            let classes: Vec<usize> = labeled.iter().map(|(_, c)| *c).collect();
            let picked = g.tape.gather_rows(logits, &rows);
            let ce = losses::graph::categorical_ce_graph(&mut g.tape, picked, &classes);
            labeled_ce_t = Some(ce);
            weighted.push(g.tape.scale(ce, labeled_weight));
        }
    }

    let objective = match weighted.split_first() {
        None => g.tape.scalar(0.0),
        Some((first, rest)) => {
            let mut acc = *first;
            for t in rest {
                acc = g.tape.add(acc, *t);
            }
            acc
        }
    };
    Ok((
        g,
        StepTerms {
            recon: recon_t,
            prior: prior_t,
            triplet: triplet_t,
            side: side_t,
            score: score_t,
            labeled_ce: labeled_ce_t,
            objective,
        },
    ))
}

fn seed_for(base: u64, epoch: usize, batch: usize, salt: u64) -> u64 {
    // splitmix-style mixing keeps per-(epoch, batch) streams independent
    let mut z = base
        .wrapping_add(0x9e37_79b9_7f4a_7c15u64.wrapping_mul(1 + epoch as u64))
        .wrapping_add(0x85eb_ca6bu64.wrapping_mul(1 + batch as u64))
        .wrapping_add(salt);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Train on unlabeled data (plus side information per the config).
pub fn train(
    spec: &ModelSpec,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<(TrainedModel, TrainHistory)> {
    train_impl(spec, data, None, cfg)
}

/// Semi-supervised variant: `labels[i] = Some(class)` adds a cross-entropy
/// term comparing the inferred score of instance `i` to the class; `None`
/// instances contribute all other terms only. With no labels (or a zero
/// `labeled_weight`) this reduces exactly to [`train`].
pub fn train_semi_supervised(
    spec: &ModelSpec,
    data: &Dataset,
    labels: &[Option<usize>],
    cfg: &TrainConfig,
) -> Result<(TrainedModel, TrainHistory)> {
    if labels.len() != data.n() {
        return Err(TrainError::Config(format!(
            "label vector length {} does not match {} rows",
            labels.len(),
            data.n()
        )));
    }
    if let Some(&Some(bad)) = labels
        .iter()
        .find(|l| matches!(l, Some(c) if *c >= spec.n_score_classes))
    {
        return Err(TrainError::Config(format!(
            "label {bad} out of range for {} score classes",
            spec.n_score_classes
        )));
    }
    train_impl(spec, data, Some(labels), cfg)
}

fn train_impl(
    spec: &ModelSpec,
    data: &Dataset,
    labels: Option<&[Option<usize>]>,
    cfg: &TrainConfig,
) -> Result<(TrainedModel, TrainHistory)> {
    cfg.validate(spec, data)?;
    let mut model = TrainedModel::init(spec.clone(), cfg.weights, cfg.seed)?;
    model.set_train_seed(cfg.seed);
    let mut opt = Adam::new(&model.store, cfg.learning_rate);
    let mut history = TrainHistory::default();

    let n = data.n();
    let d_latent = spec.latent_dim;
    let labeled_weight = cfg.labeled_weight.unwrap_or(0.0);
    let n_triplets = cfg.triplets_per_batch.unwrap_or(cfg.batch_size);

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(1);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    noise_rng.set_stream(2);

    let side_classes: Option<Vec<usize>> = match data.side() {
        Some(SideInfo::Categorical { classes, .. }) => Some(classes.clone()),
        _ => None,
    };
    let side_values: Option<Vec<f64>> = match data.side() {
        Some(SideInfo::Continuous(v)) => Some(v.clone()),
        _ => None,
    };

    for epoch in 0..cfg.epochs {
        let start = std::time::Instant::now();
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut shuffle_rng);

        // row-weighted accumulators for the epoch means
        let mut acc = LossParts {
            recon: 0.0,
            prior_kl: 0.0,
            triplet: 0.0,
            side: 0.0,
            score: 0.0,
        };
        let mut acc_ce = 0.0f64;
        let mut saw_ce = false;
        let mut rows_seen = 0usize;

        for (batch_no, chunk) in idx.chunks(cfg.batch_size).enumerate() {
            let b = chunk.len();
            let mut batch_x = Array2::zeros((b, data.n_features()));
            for (r, &i) in chunk.iter().enumerate() {
                batch_x.row_mut(r).assign(&data.features().row(i));
            }
            let batch_side: Option<Vec<usize>> = side_classes
                .as_ref()
                .map(|c| chunk.iter().map(|&i| c[i]).collect());
            let batch_side_vals: Option<Vec<f64>> = side_values
                .as_ref()
                .map(|v| chunk.iter().map(|&i| v[i]).collect());

            // triplets for this batch
            let mut x_input = batch_x.clone();
            let mut trips: Vec<Triplet> = Vec::new();
            if cfg.weights.gamma > 0.0 && b >= 2 {
                let tseed = seed_for(cfg.seed, epoch, batch_no, 3);
                match &cfg.triplet_regime {
                    TripletRegime::Off => {}
                    TripletRegime::ByClass => {
                        let classes = batch_side.as_ref().expect("validated");
                        match triplets::mine_by_class(classes, n_triplets, tseed) {
                            Ok(t) => trips = t,
                            Err(TripletError::SingleClass(_)) => {
                                log::debug!("epoch {epoch} batch {batch_no}: single side class, no triplets");
                            }
                            Err(e) => return Err(e.into()),
                        }
                    }
                    TripletRegime::ByQuantile { n_bins } => {
                        let values = batch_side_vals.as_ref().expect("validated");
                        match triplets::mine_by_quantile(values, *n_bins, n_triplets, tseed) {
                            Ok(t) => trips = t,
                            Err(TripletError::TooFewDistinctValues { .. })
                            | Err(TripletError::SingleClass(_)) => {
                                log::debug!("epoch {epoch} batch {batch_no}: degenerate side values, no triplets");
                            }
                            Err(e) => return Err(e.into()),
                        }
                    }
                    TripletRegime::SelfSupervised {
                        jitter,
                        pixel_shift,
                    } => {
                        let aug = match spec.input_kind {
                            crate::model::InputKind::Tabular => {
                                Augmentation::FeatureJitter { strength: *jitter }
                            }
                            crate::model::InputKind::Image28x28 => Augmentation::PixelShift {
                                max_shift: *pixel_shift,
                                h: 28,
                                w: 28,
                            },
                        };
                        let (t, views) =
                            triplets::mine_self_supervised(&batch_x, &aug, n_triplets, tseed)?;
                        trips = t;
                        let mut stacked = Array2::zeros((b + views.nrows(), batch_x.ncols()));
                        for r in 0..b {
                            stacked.row_mut(r).assign(&batch_x.row(r));
                        }
                        for r in 0..views.nrows() {
                            stacked.row_mut(b + r).assign(&views.row(r));
                        }
                        x_input = stacked;
                    }
                }
            }

            let noise = Array2::from_shape_fn((b, d_latent), |_| {
                <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut noise_rng)
            });

            let labeled: Vec<(usize, usize)> = match labels {
                Some(ls) => chunk
                    .iter()
                    .enumerate()
                    .filter_map(|(r, &i)| ls[i].map(|c| (r, c)))
                    .collect(),
                None => Vec::new(),
            };

            let (mut g, terms) = build_step_graph(
                &model,
                &x_input,
                b,
                &noise,
                batch_side.as_deref(),
                batch_side_vals.as_deref(),
                &trips,
                &labeled,
                labeled_weight,
                cfg.triplet_reduction,
            )?;

            let val = |v: Option<Var>| v.map_or(0.0, |v| g.tape.scalar_value(v));
            let parts = LossParts {
                recon: val(terms.recon),
                prior_kl: val(terms.prior),
                triplet: val(terms.triplet),
                side: val(terms.side),
                score: val(terms.score),
            };
            // the NaN guard names the offending component
            losses::total_loss(&parts, &cfg.weights).map_err(|e| match e {
                losses::LossError::NonFinite(name) => TrainError::NonFinite {
                    component: name.to_string(),
                    epoch,
                },
                other => TrainError::Loss(other),
            })?;
            let ce_val = terms.labeled_ce.map(|v| g.tape.scalar_value(v));
            if let Some(ce) = ce_val {
                if !ce.is_finite() {
                    return Err(TrainError::NonFinite {
                        component: "labeled_ce".into(),
                        epoch,
                    });
                }
                acc_ce += ce * b as f64;
                saw_ce = true;
            }

            g.tape.backward(terms.objective);
            let grads = g.gradients();
            drop(g);
            opt.step(&mut model.store, &grads);

            let bf = b as f64;
            acc.recon += parts.recon * bf;
            acc.prior_kl += parts.prior_kl * bf;
            acc.triplet += parts.triplet * bf;
            acc.side += parts.side * bf;
            acc.score += parts.score * bf;
            rows_seen += b;
        }

        let nf = rows_seen as f64;
        let epoch_parts = LossParts {
            recon: acc.recon / nf,
            prior_kl: acc.prior_kl / nf,
            triplet: acc.triplet / nf,
            side: acc.side / nf,
            score: acc.score / nf,
        };
        // recorded total is the exact weighted sum of the recorded parts
        let losses = losses::total_loss(&epoch_parts, &cfg.weights).map_err(|e| match e {
            losses::LossError::NonFinite(name) => TrainError::NonFinite {
                component: name.to_string(),
                epoch,
            },
            other => TrainError::Loss(other),
        })?;
        history.epochs.push(EpochRecord {
            losses,
            labeled_ce: if saw_ce { Some(acc_ce / nf) } else { None },
            wall_secs: start.elapsed().as_secs_f64(),
        });
    }
    Ok((model, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_blobs;
    use crate::divergence::{sqrt_js_geo, SkewParam};
    use crate::model::{InputKind, SideKind};

    fn assert_history_eq(a: &TrainHistory, b: &TrainHistory) {
        assert_eq!(a.epochs.len(), b.epochs.len());
        for (x, y) in a.epochs.iter().zip(&b.epochs) {
            assert_eq!(x.losses, y.losses);
            assert_eq!(x.labeled_ce, y.labeled_ce);
        }
    }

    fn blob_spec(dim: usize) -> ModelSpec {
        ModelSpec {
            input_kind: InputKind::Tabular,
            input_dim: dim,
            latent_dim: 2,
            hidden_layers: vec![16],
            n_score_classes: 4,
            side_kind: SideKind::Categorical { n_classes: 4 },
        }
    }

    #[test]
    fn zero_weights_leave_parameters_unchanged() {
        let data = make_blobs(8, 4, 2, 0.4, 1).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 8,
            weights: LossWeights {
                alpha: 0.0,
                beta: 0.0,
                gamma: 0.0,
                delta: 0.0,
                zeta: 0.0,
                ..Default::default()
            },
            seed: 5,
            ..Default::default()
        };
        let (model, history) = train(&blob_spec(2), &data, &cfg).unwrap();
        let fresh = TrainedModel::init(blob_spec(2), cfg.weights, cfg.seed).unwrap();
        for ((_, a), (_, b)) in model.store.iter().zip(fresh.store.iter()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        for e in &history.epochs {
            assert_eq!(e.losses.total, 0.0);
        }
    }

    #[test]
    fn recon_only_training_decreases_loss() {
        let data = make_blobs(30, 4, 2, 0.4, 2).unwrap();
        let cfg = TrainConfig {
            epochs: 5,
            batch_size: 16,
            learning_rate: 3e-3,
            weights: LossWeights {
                alpha: 1.0,
                beta: 0.0,
                gamma: 0.0,
                delta: 0.0,
                zeta: 0.0,
                ..Default::default()
            },
            seed: 11,
            ..Default::default()
        };
        let (_, history) = train(&blob_spec(2), &data, &cfg).unwrap();
        let recons: Vec<f64> = history.epochs.iter().map(|e| e.losses.recon).collect();
        for w in recons.windows(2) {
            assert!(w[1] < w[0], "recon did not strictly decrease: {recons:?}");
        }
    }

    #[test]
    fn triplet_only_training_separates_classes() {
        let data = make_blobs(25, 4, 2, 0.5, 3).unwrap();
        let (train_ds, test_ds) = data.split(0.8, 7).unwrap();
        let cfg = TrainConfig {
            epochs: 30,
            batch_size: 20,
            learning_rate: 5e-3,
            weights: LossWeights {
                alpha: 0.0,
                beta: 0.0,
                gamma: 1.0,
                delta: 0.0,
                zeta: 0.0,
                margin: 1.0,
                lambda_skew: 0.5,
            },
            triplet_regime: TripletRegime::ByClass,
            triplet_reduction: TripletReduction::Mean,
            seed: 13,
            ..Default::default()
        };
        let (model, _) = train(&blob_spec(2), &train_ds, &cfg).unwrap();

        let posts = model.encode_batch(test_ds.features()).unwrap();
        let classes: Vec<usize> = match test_ds.side().unwrap() {
            SideInfo::Categorical { classes, .. } => classes.clone(),
            _ => panic!(),
        };
        let s = SkewParam::symmetric();
        let mut within = (0.0, 0usize);
        let mut between = (0.0, 0usize);
        for i in 0..posts.len() {
            for j in i + 1..posts.len() {
                let d = sqrt_js_geo(&posts[i], &posts[j], s).unwrap();
                if classes[i] == classes[j] {
                    within = (within.0 + d, within.1 + 1);
                } else {
                    between = (between.0 + d, between.1 + 1);
                }
            }
        }
        let w = within.0 / within.1 as f64;
        let b = between.0 / between.1 as f64;
        assert!(w < b, "within {w} !< between {b}");
    }

    #[test]
    fn history_is_reproducible_and_accounts_exactly() {
        let data = make_blobs(10, 4, 2, 0.4, 4).unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 10,
            triplet_regime: TripletRegime::ByClass,
            seed: 21,
            ..Default::default()
        };
        let (_, h1) = train(&blob_spec(2), &data, &cfg).unwrap();
        let (_, h2) = train(&blob_spec(2), &data, &cfg).unwrap();
        assert_eq!(h1.epochs.len(), h2.epochs.len());
        for (a, b) in h1.epochs.iter().zip(&h2.epochs) {
            assert_eq!(a.losses.total.to_bits(), b.losses.total.to_bits());
            assert_eq!(a.losses.recon.to_bits(), b.losses.recon.to_bits());
            assert_eq!(a.losses.triplet.to_bits(), b.losses.triplet.to_bits());
        }
        // exact accounting every epoch
        let w = cfg.weights;
        for e in &h1.epochs {
            let manual = w.alpha * e.losses.recon
                + w.beta * e.losses.prior_kl
                + w.gamma * e.losses.triplet
                + w.delta * e.losses.side
                + w.zeta * e.losses.score;
            assert_eq!(e.losses.total, manual);
        }
    }

    #[test]
    fn training_never_reads_eval_labels() {
        let data = make_blobs(10, 4, 2, 0.4, 5).unwrap();
        let before = data.eval_read_count();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 10,
            triplet_regime: TripletRegime::ByClass,
            seed: 2,
            ..Default::default()
        };
        let _ = train(&blob_spec(2), &data, &cfg).unwrap();
        assert_eq!(data.eval_read_count(), before);
    }

    #[test]
    fn missing_side_with_delta_is_config_error() {
        let data = make_blobs(6, 2, 2, 0.4, 6).unwrap();
        let bare = Dataset::new(data.features().clone(), None, None, "full").unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 4,
            seed: 1,
            ..Default::default()
        };
        let mut spec = blob_spec(2);
        spec.side_kind = SideKind::Categorical { n_classes: 2 };
        match train(&spec, &bare, &cfg) {
            Err(TrainError::Config(msg)) => assert!(msg.contains("side")),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn nan_abort_names_component() {
        // a huge learning rate on wide-spread data overflows the recon
        // term within a few epochs
        let data = make_blobs(20, 2, 2, 5.0, 7).unwrap();
        let mut features = data.features().clone();
        // squared residuals of this magnitude overflow f64 immediately
        features.mapv_inplace(|v| v * 1e160);
        let wild = Dataset::new(features, None, None, "full").unwrap();
        let mut spec = blob_spec(2);
        spec.side_kind = SideKind::None;
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 8,
            learning_rate: 1e-3,
            weights: LossWeights {
                alpha: 1.0,
                beta: 0.0,
                gamma: 0.0,
                delta: 0.0,
                zeta: 0.0,
                ..Default::default()
            },
            seed: 3,
            ..Default::default()
        };
        match train(&spec, &wild, &cfg) {
            Err(TrainError::NonFinite { component, .. }) => {
                assert_eq!(component, "recon");
            }
            Ok(_) => panic!("expected a NaN abort"),
            Err(other) => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn semi_supervised_reduces_to_train() {
        let data = make_blobs(10, 4, 2, 0.4, 8).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 10,
            triplet_regime: TripletRegime::ByClass,
            labeled_weight: Some(1.0),
            seed: 31,
            ..Default::default()
        };
        // no labeled instances: identical to train
        let none: Vec<Option<usize>> = vec![None; data.n()];
        let (_, h_plain) = train(&blob_spec(2), &data, &cfg).unwrap();
        let (_, h_semi) = train_semi_supervised(&blob_spec(2), &data, &none, &cfg).unwrap();
        assert_history_eq(&h_plain, &h_semi);

        // labeled weight zero: identical history even with labels present
        let mut cfg0 = cfg.clone();
        cfg0.labeled_weight = Some(0.0);
        let some: Vec<Option<usize>> = (0..data.n())
            .map(|i| if i % 5 == 0 { Some(i % 4) } else { None })
            .collect();
        let (_, h_zero) = train_semi_supervised(&blob_spec(2), &data, &some, &cfg0).unwrap();
        assert_history_eq(&h_plain, &h_zero);

        // active labels produce a recorded cross-entropy
        let (_, h_lab) = train_semi_supervised(&blob_spec(2), &data, &some, &cfg).unwrap();
        assert!(h_lab.epochs.iter().all(|e| e.labeled_ce.is_some()));
    }

    #[test]
    fn end_to_end_gradient_check_tiny_model() {
        // every loss branch active on a d = 2 model with a batch of 8;
        // objective gradients for a sample of parameters must match
        // central finite differences within 1e-3 relative error
        use ndarray::Array2;
        use rand::Rng;
        use rand_distr::{Distribution, StandardNormal};

        let spec = ModelSpec {
            input_kind: InputKind::Tabular,
            input_dim: 3,
            latent_dim: 2,
            hidden_layers: vec![6],
            n_score_classes: 3,
            side_kind: SideKind::Categorical { n_classes: 2 },
        };
        let weights = LossWeights {
            alpha: 1.0,
            beta: 0.7,
            gamma: 1.3,
            delta: 0.9,
            zeta: 1.1,
            margin: 2.0,
            lambda_skew: 0.4,
        };
        let model = {
            let mut m = TrainedModel::init(spec.clone(), weights, 99).unwrap();
            m.set_train_seed(99);
            m
        };
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let x = Array2::from_shape_fn((8, 3), |_| rng.gen_range(-1.0..1.0));
        let noise = Array2::from_shape_fn((8, 2), |_| {
            <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
        });
        let side: Vec<usize> = (0..8).map(|i| i % 2).collect();
        let trips = vec![
            Triplet {
                anchor: 0,
                positive: 2,
                negative: 1,
            },
            Triplet {
                anchor: 3,
                positive: 5,
                negative: 4,
            },
        ];
        let labeled = vec![(1usize, 2usize), (6, 0)];

        let objective = |m: &TrainedModel| -> f64 {
            let (g, terms) = build_step_graph(
                m,
                &x,
                8,
                &noise,
                Some(&side),
                None,
                &trips,
                &labeled,
                2.5,
                TripletReduction::Sum,
            )
            .unwrap();
            g.tape.scalar_value(terms.objective)
        };

        let (mut g, terms) = build_step_graph(
            &model,
            &x,
            8,
            &noise,
            Some(&side),
            None,
            &trips,
            &labeled,
            2.5,
            TripletReduction::Sum,
        )
        .unwrap();
        g.tape.backward(terms.objective);
        let grads = g.gradients();
        drop(g);

        // probe a few entries of every parameter array
        let names: Vec<String> = model.parameters().map(|(n, _)| n.to_string()).collect();
        let eps = 1e-5;
        let mut checked = 0usize;
        for (pi, name) in names.iter().enumerate() {
            let Some(grad) = &grads[pi] else { continue };
            let shape = grad.raw_dim();
            let probes = [(0usize, 0usize), (shape[0] - 1, shape[1] - 1)];
            for &(r, c) in &probes {
                let analytic = grad[(r, c)];
                let mut perturbed = model.clone();
                perturbed.store.value_mut(crate::nn::ParamId(pi))[(r, c)] += eps;
                let up = objective(&perturbed);
                let mut perturbed = model.clone();
                perturbed.store.value_mut(crate::nn::ParamId(pi))[(r, c)] -= eps;
                let down = objective(&perturbed);
                let numeric = (up - down) / (2.0 * eps);
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
                assert!(
                    rel <= 1e-3,
                    "{name}[{r},{c}]: analytic {analytic} vs numeric {numeric}"
                );
                checked += 1;
            }
        }
        assert!(checked >= 20, "probed only {checked} entries");
    }

    #[test]
    fn trained_recon_beats_untrained_baseline() {
        let data = make_blobs(40, 4, 2, 0.5, 14).unwrap();
        let (train_ds, test_ds) = data.split(0.8, 3).unwrap();
        let weights = LossWeights {
            alpha: 1.0,
            beta: 0.0,
            gamma: 0.0,
            delta: 0.0,
            zeta: 0.0,
            ..Default::default()
        };
        let cfg = TrainConfig {
            epochs: 20,
            batch_size: 32,
            learning_rate: 3e-3,
            weights,
            seed: 20,
            ..Default::default()
        };
        let (trained, _) = train(&blob_spec(2), &train_ds, &cfg).unwrap();
        let fresh = TrainedModel::init(blob_spec(2), weights, cfg.seed).unwrap();

        let nll = |m: &TrainedModel| {
            let mu = m.embed_batch(test_ds.features()).unwrap();
            let recon = m.decode_batch(&mu).unwrap();
            crate::losses::reconstruction_nll_batch(
                test_ds.features(),
                &recon,
                crate::losses::Likelihood::GaussianUnitVar,
            )
            .unwrap()
        };
        assert!(
            nll(&trained) < nll(&fresh),
            "training failed to improve reconstruction"
        );
    }

    #[test]
    fn self_supervised_regime_trains_without_side_info() {
        let data = make_blobs(20, 4, 2, 0.5, 15).unwrap();
        let bare = Dataset::new(data.features().clone(), None, None, "full").unwrap();
        let mut spec = blob_spec(2);
        spec.side_kind = SideKind::None;
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 16,
            weights: LossWeights {
                delta: 0.0,
                beta: 0.2,
                ..Default::default()
            },
            triplet_regime: TripletRegime::SelfSupervised {
                jitter: 0.1,
                pixel_shift: 0,
            },
            triplet_reduction: TripletReduction::Mean,
            seed: 33,
            ..Default::default()
        };
        let (_, history) = train(&spec, &bare, &cfg).unwrap();
        assert_eq!(history.epochs.len(), 3);
        for e in &history.epochs {
            assert!(e.losses.total.is_finite());
            assert!(
                e.losses.triplet > 0.0,
                "augmented positives should engage the hinge"
            );
        }
        // same seed reproduces the history bitwise
        let (_, h2) = train(&spec, &bare, &cfg).unwrap();
        assert_history_eq(&history, &h2);
    }

    #[test]
    fn semi_supervised_label_out_of_range() {
        let data = make_blobs(4, 2, 2, 0.4, 9).unwrap();
        let mut spec = blob_spec(2);
        spec.side_kind = SideKind::Categorical { n_classes: 2 };
        let labels: Vec<Option<usize>> = (0..data.n()).map(|_| Some(7)).collect();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 4,
            seed: 1,
            ..Default::default()
        };
        assert!(matches!(
            train_semi_supervised(&spec, &data, &labels, &cfg),
            Err(TrainError::Config(_))
        ));
    }
}
