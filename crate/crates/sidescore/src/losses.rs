//! The five loss terms and their weighted combination.
//!
//! Each term exists in two forms that are kept in agreement by tests:
//!
//! - a pure function of plain values, used by evaluation, the property
//!   checker, and anywhere a number is needed without gradients;
//! - a tape builder in [`graph`], used by the trainer, whose gradients are
//!   validated against central finite differences.
//!
//! The total is the weighted sum
//! `alpha * recon + beta * prior_kl + gamma * triplet + delta * side + zeta * score`.
//! The score term is the *negated* mutual-information estimate
//! `H(C|Z) - H(mean C)`: minimizing it maximizes the information the latent
//! code carries about the inferred score. Batch reductions are sequential
//! left-to-right sums, so results are deterministic given input order.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::divergence::{self, GaussianDiag, SkewParam};
use crate::triplets::Triplet;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("bernoulli likelihood requires targets in [0,1], got {0}")]
    BernoulliRange(f64),
    #[error("probability vector must be a simplex (sum {sum})")]
    NotSimplex { sum: f64 },
    #[error("score distribution needs at least two classes")]
    TooFewClasses,
    #[error("class index {index} out of range for {classes} classes")]
    ClassOutOfRange { index: usize, classes: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("inconsistent class count in batch: {0} vs {1}")]
    InconsistentClasses(usize, usize),
    #[error("non-finite {0} component")]
    NonFinite(&'static str),
    #[error("invalid weights: {0}")]
    InvalidWeights(String),
    #[error(transparent)]
    Divergence(#[from] divergence::DivergenceError),
}

type Result<T> = std::result::Result<T, LossError>;

/// Weights of the five loss components plus the triplet margin and the
/// skew parameter of the geometric mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// reconstruction
    #[serde(default = "one")]
    pub alpha: f64,
    /// KL to the standard-normal prior
    #[serde(default = "one")]
    pub beta: f64,
    /// triplet
    #[serde(default = "one")]
    pub gamma: f64,
    /// side information
    #[serde(default = "one")]
    pub delta: f64,
    /// score mutual information
    #[serde(default = "one")]
    pub zeta: f64,
    /// triplet margin
    #[serde(default = "one")]
    pub margin: f64,
    /// skew of the geometric mean, in [0, 1]
    #[serde(default = "half")]
    pub lambda_skew: f64,
}

fn one() -> f64 {
    1.0
}

fn half() -> f64 {
    0.5
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
            delta: 1.0,
            zeta: 1.0,
            margin: 1.0,
            lambda_skew: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let named = [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("delta", self.delta),
            ("zeta", self.zeta),
            ("margin", self.margin),
        ];
        for (name, v) in named {
            if !v.is_finite() || v < 0.0 {
                return Err(LossError::InvalidWeights(format!(
                    "{name} must be >= 0, got {v}"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.lambda_skew) {
            return Err(LossError::InvalidWeights(format!(
                "lambda_skew must be in [0,1], got {}",
                self.lambda_skew
            )));
        }
        Ok(())
    }

    pub fn skew(&self) -> SkewParam {
        SkewParam::new(self.lambda_skew).expect("validated lambda")
    }
}

/// Per-component values of one evaluation of the objective.
/// `total` is always the exact weighted sum of the parts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon: f64,
    pub prior_kl: f64,
    pub triplet: f64,
    pub side: f64,
    pub score: f64,
    pub total: f64,
}

/// A probability vector over the `K >= 2` score classes.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreDistribution {
    probs: Vec<f64>,
}

impl ScoreDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 2 {
            return Err(LossError::TooFewClasses);
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-6 || probs.iter().any(|&p| !(0.0..=1.0 + 1e-9).contains(&p)) {
            return Err(LossError::NotSimplex { sum });
        }
        Ok(Self { probs })
    }

    pub fn n_classes(&self) -> usize {
        self.probs.len()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Argmax class; ties break toward the lowest index.
    pub fn hard_class(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }
}

/// Observation likelihood of the decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Likelihood {
    /// pixels in [0,1]; decoder emits per-feature probabilities
    Bernoulli,
    /// standardized features; decoder emits the mean of a unit-variance Gaussian
    GaussianUnitVar,
}

/// Per-instance negative log likelihood of `x` under the reconstruction.
pub fn reconstruction_nll(x: &[f64], recon: &[f64], likelihood: Likelihood) -> Result<f64> {
    if x.len() != recon.len() {
        return Err(LossError::DimensionMismatch {
            left: x.len(),
            right: recon.len(),
        });
    }
    match likelihood {
        Likelihood::Bernoulli => {
            let mut acc = 0.0;
            for (&xi, &pi) in x.iter().zip(recon) {
                if !(0.0..=1.0).contains(&xi) {
                    return Err(LossError::BernoulliRange(xi));
                }
                // endpoint probabilities that match the target contribute
                // exactly zero; mismatched endpoints are clamped
                if xi == 1.0 && pi == 1.0 || xi == 0.0 && pi == 0.0 {
                    continue;
                }
                let p = pi.clamp(1e-300, 1.0 - 1e-16);
                acc += -(xi * p.ln() + (1.0 - xi) * (1.0 - p).ln());
            }
            Ok(acc)
        }
        Likelihood::GaussianUnitVar => {
            let half_ln_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
            let mut acc = 0.0;
            for (&xi, &mi) in x.iter().zip(recon) {
                let d = xi - mi;
                acc += 0.5 * d * d + half_ln_2pi;
            }
            Ok(acc)
        }
    }
}

/// Mean reconstruction NLL over a batch of rows.
pub fn reconstruction_nll_batch(
    x: &ndarray::Array2<f64>,
    recon: &ndarray::Array2<f64>,
    likelihood: Likelihood,
) -> Result<f64> {
    if x.dim() != recon.dim() {
        return Err(LossError::DimensionMismatch {
            left: x.len(),
            right: recon.len(),
        });
    }
    let n = x.nrows();
    if n == 0 {
        return Err(LossError::EmptyBatch);
    }
    let mut acc = 0.0;
    for (xr, rr) in x.rows().into_iter().zip(recon.rows()) {
        acc += reconstruction_nll(
            xr.as_slice().expect("contiguous row"),
            rr.as_slice().expect("contiguous row"),
            likelihood,
        )?;
    }
    Ok(acc / n as f64)
}

/// KL of a posterior against the standard-normal prior.
pub fn prior_kl(posterior: &GaussianDiag) -> f64 {
    let mut acc = 0.0;
    for (&m, &v) in posterior.mean().iter().zip(posterior.var()) {
        acc += 0.5 * (v + m * m - 1.0 - v.ln());
    }
    acc.max(0.0)
}

/// Mean prior KL over a batch of posteriors.
pub fn prior_kl_batch(posteriors: &[GaussianDiag]) -> Result<f64> {
    if posteriors.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    Ok(posteriors.iter().map(prior_kl).sum::<f64>() / posteriors.len() as f64)
}

/// What the side head predicts for one instance.
#[derive(Debug, Clone)]
pub enum SidePrediction {
    /// probability per side class
    Categorical(Vec<f64>),
    /// Gaussian over a continuous side value
    Continuous { mean: f64, var: f64 },
}

/// The observed side information for one instance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SideObservation {
    Class(usize),
    Value(f64),
}

/// Negative log likelihood of the observed side information under the
/// head's prediction: cross-entropy for categorical side info, Gaussian
/// NLL for continuous.
pub fn side_nll(predicted: &SidePrediction, observed: &SideObservation) -> Result<f64> {
    match (predicted, observed) {
        (SidePrediction::Categorical(probs), SideObservation::Class(c)) => {
            let sum: f64 = probs.iter().sum();
            if (sum - 1.0).abs() > 1e-6 || probs.iter().any(|&p| p < -1e-12) {
                return Err(LossError::NotSimplex { sum });
            }
            if *c >= probs.len() {
                return Err(LossError::ClassOutOfRange {
                    index: *c,
                    classes: probs.len(),
                });
            }
            Ok(-probs[*c].max(1e-300).ln())
        }
        (SidePrediction::Continuous { mean, var }, SideObservation::Value(s)) => {
            let v = var.max(crate::divergence::VAR_FLOOR);
            let d = s - mean;
            Ok(0.5 * ((2.0 * std::f64::consts::PI * v).ln() + d * d / v))
        }
        _ => Err(LossError::DimensionMismatch { left: 0, right: 0 }),
    }
}

/// Batch mean of [`side_nll`].
pub fn side_nll_batch(predicted: &[SidePrediction], observed: &[SideObservation]) -> Result<f64> {
    if predicted.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    if predicted.len() != observed.len() {
        return Err(LossError::DimensionMismatch {
            left: predicted.len(),
            right: observed.len(),
        });
    }
    let mut acc = 0.0;
    for (p, o) in predicted.iter().zip(observed) {
        acc += side_nll(p, o)?;
    }
    Ok(acc / predicted.len() as f64)
}

fn entropy(probs: &[f64]) -> f64 {
    probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum()
}

/// Negated mutual-information estimate over a batch of score
/// distributions: mean per-instance entropy minus the entropy of the
/// batch-mean distribution. Lives in `[-ln K, 0]`; the minimum `-ln K`
/// is attained exactly when every instance is confident (zero entropy)
/// and the batch is balanced (uniform marginal).
pub fn score_mi_loss(batch: &[ScoreDistribution]) -> Result<f64> {
    let Some(first) = batch.first() else {
        return Err(LossError::EmptyBatch);
    };
    let k = first.n_classes();
    let n = batch.len() as f64;
    let mut marginal = vec![0.0; k];
    let mut cond = 0.0;
    for dist in batch {
        if dist.n_classes() != k {
            return Err(LossError::InconsistentClasses(k, dist.n_classes()));
        }
        cond += entropy(dist.probs());
        for (m, &p) in marginal.iter_mut().zip(dist.probs()) {
            *m += p;
        }
    }
    for m in &mut marginal {
        *m /= n;
    }
    Ok(cond / n - entropy(&marginal))
}

/// How a batch of triplet hinges is reduced to a single number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TripletReduction {
    /// faithful to the summed objective
    #[default]
    Sum,
    /// scale-stable alternative
    Mean,
}

/// Hinge loss of one triplet under the sqrt skew-geometric JS distance:
/// `max(0, d(a,p) - d(a,n) + margin)`.
pub fn triplet_sqrt_js(
    anchor: &GaussianDiag,
    positive: &GaussianDiag,
    negative: &GaussianDiag,
    w: &LossWeights,
) -> Result<f64> {
    let s = w.skew();
    let d_ap = divergence::sqrt_js_geo(anchor, positive, s)?;
    let d_an = divergence::sqrt_js_geo(anchor, negative, s)?;
    Ok((d_ap - d_an + w.margin).max(0.0))
}

/// Reduce the hinge over a list of triplets indexing into `posteriors`.
pub fn triplet_sqrt_js_batch(
    posteriors: &[GaussianDiag],
    triplets: &[Triplet],
    w: &LossWeights,
    reduction: TripletReduction,
) -> Result<f64> {
    if triplets.is_empty() {
        return Ok(0.0);
    }
    let mut acc = 0.0;
    for t in triplets {
        acc += triplet_sqrt_js(
            &posteriors[t.anchor],
            &posteriors[t.positive],
            &posteriors[t.negative],
            w,
        )?;
    }
    Ok(match reduction {
        TripletReduction::Sum => acc,
        TripletReduction::Mean => acc / triplets.len() as f64,
    })
}

/// Raw component values prior to weighting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub recon: f64,
    pub prior_kl: f64,
    pub triplet: f64,
    pub side: f64,
    pub score: f64,
}

/// Combine the five components into the weighted total. Rejects non-finite
/// components so a diverging run aborts with the culprit named.
pub fn total_loss(parts: &LossParts, w: &LossWeights) -> Result<LossBreakdown> {
    for (name, v) in [
        ("recon", parts.recon),
        ("prior_kl", parts.prior_kl),
        ("triplet", parts.triplet),
        ("side", parts.side),
        ("score", parts.score),
    ] {
        if !v.is_finite() {
            return Err(LossError::NonFinite(name));
        }
    }
    let total = w.alpha * parts.recon
        + w.beta * parts.prior_kl
        + w.gamma * parts.triplet
        + w.delta * parts.side
        + w.zeta * parts.score;
    Ok(LossBreakdown {
        recon: parts.recon,
        prior_kl: parts.prior_kl,
        triplet: parts.triplet,
        side: parts.side,
        score: parts.score,
        total,
    })
}

/// Tape builders for every term. Each returns a 1x1 node.
pub mod graph {
    use ndarray::Array2;

    use crate::nn::{Tape, Var};
    use crate::triplets::Triplet;

    use super::TripletReduction;

    /// Mean Bernoulli NLL from decoder *logits*:
    /// `mean_n sum_d [softplus(l) - x * l]`.
    pub fn bernoulli_nll_from_logits(t: &mut Tape, logits: Var, x: &Array2<f64>) -> Var {
        let xc = t.constant(x.clone());
        let sp = t.softplus(logits);
        let xl = t.mul(xc, logits);
        let per = t.sub(sp, xl);
        let rows = t.sum_axis1(per);
        t.mean_all(rows)
    }

    /// Mean unit-variance Gaussian NLL from the decoder mean, constant
    /// `d/2 ln(2 pi)` included so the floor matches the pure form.
    pub fn gaussian_unit_var_nll(t: &mut Tape, mean: Var, x: &Array2<f64>) -> Var {
        let d = x.ncols() as f64;
        let xc = t.constant(x.clone());
        let diff = t.sub(xc, mean);
        let sq = t.square(diff);
        let rows = t.sum_axis1(sq);
        let half = t.scale(rows, 0.5);
        let m = t.mean_all(half);
        t.add_scalar(m, d * 0.5 * (2.0 * std::f64::consts::PI).ln())
    }

    /// Mean KL(q || N(0, I)) from posterior mean and variance rows.
    pub fn prior_kl_graph(t: &mut Tape, mu: Var, var: Var) -> Var {
        let mu2 = t.square(mu);
        let lnv = t.ln(var);
        let s1 = t.add(var, mu2);
        let s2 = t.sub(s1, lnv);
        let s3 = t.add_scalar(s2, -1.0);
        let s4 = t.scale(s3, 0.5);
        let rows = t.sum_axis1(s4);
        t.mean_all(rows)
    }

    /// Mean cross-entropy of observed classes under row logits.
    pub fn categorical_ce_graph(t: &mut Tape, logits: Var, classes: &[usize]) -> Var {
        let ls = t.log_softmax(logits);
        let picked = t.pick_per_row(ls, classes);
        let m = t.mean_all(picked);
        t.neg(m)
    }

    /// Mean Gaussian NLL of observed side values under predicted
    /// per-row mean and variance columns (n x 1 each).
    pub fn gaussian_side_nll_graph(
        t: &mut Tape,
        mean: Var,
        var: Var,
        observed: &Array2<f64>,
    ) -> Var {
        let obs = t.constant(observed.clone());
        let diff = t.sub(obs, mean);
        let sq = t.square(diff);
        let ratio = t.div(sq, var);
        let lnv = t.ln(var);
        let tau = 2.0 * std::f64::consts::PI;
        let lnv2pi = t.add_scalar(lnv, tau.ln());
        let s = t.add(ratio, lnv2pi);
        let h = t.scale(s, 0.5);
        t.mean_all(h)
    }

    /// Negated mutual-information estimate from score logits:
    /// `H(C|Z) - H(mean C)`.
    pub fn score_mi_graph(t: &mut Tape, logits: Var) -> Var {
        let ls = t.log_softmax(logits);
        let p = t.exp(ls);
        // conditional entropy: mean over rows of -sum p * log p
        let pl = t.mul(p, ls);
        let rows = t.sum_axis1(pl);
        let mean_neg = t.mean_all(rows);
        let h_cond = t.neg(mean_neg);
        // marginal entropy of the batch-mean distribution
        let marg = t.mean_axis0(p);
        let marg_safe = t.max_const(marg, 1e-30);
        let ln_marg = t.ln(marg_safe);
        let ml = t.mul(marg, ln_marg);
        let msum = t.sum_all(ml);
        let h_marg = t.neg(msum);
        t.sub(h_cond, h_marg)
    }

    /// Per-row skew-geometric JS between two stacks of diagonal Gaussians
    /// (m x d mean/variance pairs) -> m x 1.
    pub fn js_geo_rows_graph(
        t: &mut Tape,
        mu1: Var,
        var1: Var,
        mu2: Var,
        var2: Var,
        lambda: f64,
    ) -> Var {
        let l = lambda;
        let r1 = t.recip(var1);
        let r2 = t.recip(var2);
        let r1s = t.scale(r1, 1.0 - l);
        let r2s = t.scale(r2, l);
        let prec = t.add(r1s, r2s);
        let vl = t.recip(prec);
        let m1v = t.div(mu1, var1);
        let m2v = t.div(mu2, var2);
        let m1s = t.scale(m1v, 1.0 - l);
        let m2s = t.scale(m2v, l);
        let msum = t.add(m1s, m2s);
        let ml = t.mul(vl, msum);
        let v1s = t.scale(var1, 1.0 - l);
        let v2s = t.scale(var2, l);
        let vsum = t.add(v1s, v2s);
        let trace = t.mul(vsum, prec);
        let ln_vl = t.ln(vl);
        let ln_v1 = t.ln(var1);
        let ln_v2 = t.ln(var2);
        let ln_v1s = t.scale(ln_v1, 1.0 - l);
        let ln_v2s = t.scale(ln_v2, l);
        let ln_mix = t.add(ln_v1s, ln_v2s);
        let logdet = t.sub(ln_vl, ln_mix);
        let d1 = t.sub(ml, mu1);
        let d2 = t.sub(ml, mu2);
        let d1sq = t.square(d1);
        let d2sq = t.square(d2);
        let d1s = t.scale(d1sq, 1.0 - l);
        let d2s = t.scale(d2sq, l);
        let dsum = t.add(d1s, d2s);
        let quad = t.mul(dsum, prec);
        let a = t.add(trace, logdet);
        let b = t.add(a, quad);
        let c = t.add_scalar(b, -1.0);
        let half = t.scale(c, 0.5);
        t.sum_axis1(half)
    }

    /// Triplet hinge over batch posteriors:
    /// `reduce max(0, sqrt(js(a,p)) - sqrt(js(a,n)) + margin)`.
    ///
    /// The js values are floored at 1e-12 before the square root so
    /// coincident posteriors cannot produce an infinite slope.
    pub fn triplet_graph(
        t: &mut Tape,
        mu: Var,
        var: Var,
        triplets: &[Triplet],
        lambda: f64,
        margin: f64,
        reduction: TripletReduction,
    ) -> Var {
        let a_idx: Vec<usize> = triplets.iter().map(|t| t.anchor).collect();
        let p_idx: Vec<usize> = triplets.iter().map(|t| t.positive).collect();
        let n_idx: Vec<usize> = triplets.iter().map(|t| t.negative).collect();
        let mu_a = t.gather_rows(mu, &a_idx);
        let var_a = t.gather_rows(var, &a_idx);
        let mu_p = t.gather_rows(mu, &p_idx);
        let var_p = t.gather_rows(var, &p_idx);
        let mu_n = t.gather_rows(mu, &n_idx);
        let var_n = t.gather_rows(var, &n_idx);
        let js_ap = js_geo_rows_graph(t, mu_a, var_a, mu_p, var_p, lambda);
        let js_an = js_geo_rows_graph(t, mu_a, var_a, mu_n, var_n, lambda);
        let js_ap_f = t.max_const(js_ap, 1e-12);
        let js_an_f = t.max_const(js_an, 1e-12);
        let d_ap = t.sqrt(js_ap_f);
        let d_an = t.sqrt(js_an_f);
        let diff = t.sub(d_ap, d_an);
        let shifted = t.add_scalar(diff, margin);
        let hinge = t.relu(shifted);
        match reduction {
            TripletReduction::Sum => t.sum_all(hinge),
            TripletReduction::Mean => t.mean_all(hinge),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::max_rel_error;
    use crate::nn::Tape;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bernoulli_perfect_reconstruction_is_zero() {
        let x = [1.0, 0.0, 1.0];
        let r = [1.0, 0.0, 1.0];
        let v = reconstruction_nll(&x, &r, Likelihood::Bernoulli).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    #[allow(clippy::approx_constant)] // 0.6931 is the documented hand value
    fn bernoulli_half_probability() {
        let v = reconstruction_nll(&[1.0], &[0.5], Likelihood::Bernoulli).unwrap();
        assert!((v - 2.0f64.ln()).abs() < 1e-12);
        assert!((v - 0.6931).abs() < 1e-4);
    }

    #[test]
    fn bernoulli_rejects_out_of_range_target() {
        assert!(matches!(
            reconstruction_nll(&[1.5], &[0.5], Likelihood::Bernoulli),
            Err(LossError::BernoulliRange(_))
        ));
    }

    #[test]
    fn gaussian_nll_floor_at_mean() {
        let x = [0.3, -1.2, 0.0, 2.0];
        let v = reconstruction_nll(&x, &x, Likelihood::GaussianUnitVar).unwrap();
        let floor = 4.0 * 0.5 * (2.0 * std::f64::consts::PI).ln();
        assert!((v - floor).abs() < 1e-12);
    }

    #[test]
    fn recon_dimension_mismatch() {
        assert!(matches!(
            reconstruction_nll(&[1.0], &[0.5, 0.5], Likelihood::Bernoulli),
            Err(LossError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn prior_kl_hand_values() {
        assert_eq!(prior_kl(&GaussianDiag::standard(3)), 0.0);
        let p = GaussianDiag::new(vec![1.0, 1.0], vec![1.0, 1.0]).unwrap();
        assert!((prior_kl(&p) - 1.0).abs() < 1e-12);
        let q = GaussianDiag::scalar(0.0, 4.0).unwrap();
        let expect = 0.5 * (4.0 - 1.0 - 4.0f64.ln());
        assert!((prior_kl(&q) - expect).abs() < 1e-12);
        assert!((prior_kl(&q) - 0.8069).abs() < 1e-4);
    }

    #[test]
    fn side_nll_categorical_cases() {
        let pred = SidePrediction::Categorical(vec![0.0, 1.0, 0.0]);
        let v = side_nll(&pred, &SideObservation::Class(1)).unwrap();
        assert!(v.abs() < 1e-9);

        let uniform = SidePrediction::Categorical(vec![0.5, 0.5]);
        let v = side_nll(&uniform, &SideObservation::Class(0)).unwrap();
        assert!((v - 2.0f64.ln()).abs() < 1e-12);

        assert!(matches!(
            side_nll(&uniform, &SideObservation::Class(5)),
            Err(LossError::ClassOutOfRange { .. })
        ));
        let bad = SidePrediction::Categorical(vec![0.9, 0.9]);
        assert!(matches!(
            side_nll(&bad, &SideObservation::Class(0)),
            Err(LossError::NotSimplex { .. })
        ));
    }

    #[test]
    fn side_nll_continuous_at_mean() {
        let pred = SidePrediction::Continuous {
            mean: 2.0,
            var: 1.0,
        };
        let v = side_nll(&pred, &SideObservation::Value(2.0)).unwrap();
        assert!((v - 0.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);
        assert!((v - 0.9189).abs() < 1e-4);
    }

    fn one_hot(k: usize, on: usize) -> ScoreDistribution {
        let mut p = vec![0.0; k];
        p[on] = 1.0;
        ScoreDistribution::new(p).unwrap()
    }

    fn uniform(k: usize) -> ScoreDistribution {
        ScoreDistribution::new(vec![1.0 / k as f64; k]).unwrap()
    }

    #[test]
    fn score_mi_extremes() {
        // uniform predictions: both entropies are ln K
        let batch: Vec<_> = (0..8).map(|_| uniform(4)).collect();
        assert!(score_mi_loss(&batch).unwrap().abs() < 1e-9);

        // confident and balanced: -ln K
        let batch: Vec<_> = (0..4).map(|i| one_hot(4, i)).collect();
        let v = score_mi_loss(&batch).unwrap();
        assert!((v + 4.0f64.ln()).abs() < 1e-9, "v = {v}");

        // confident but collapsed: 0
        let batch: Vec<_> = (0..6).map(|_| one_hot(4, 2)).collect();
        assert!(score_mi_loss(&batch).unwrap().abs() < 1e-9);
    }

    #[test]
    fn score_mi_batch_and_label_permutation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let k = 5;
        let batch: Vec<ScoreDistribution> = (0..16)
            .map(|_| {
                let raw: Vec<f64> = (0..k).map(|_| rng.gen_range(0.01..1.0)).collect();
                let s: f64 = raw.iter().sum();
                ScoreDistribution::new(raw.into_iter().map(|p| p / s).collect()).unwrap()
            })
            .collect();
        let base = score_mi_loss(&batch).unwrap();

        let mut shuffled = batch.clone();
        shuffled.reverse();
        shuffled.swap(0, 7);
        assert!((score_mi_loss(&shuffled).unwrap() - base).abs() < 1e-12);

        // relabel classes by a fixed permutation
        let perm = [3usize, 0, 4, 1, 2];
        let relabeled: Vec<ScoreDistribution> = batch
            .iter()
            .map(|d| {
                let mut p = vec![0.0; k];
                for (i, &pi) in d.probs().iter().enumerate() {
                    p[perm[i]] = pi;
                }
                ScoreDistribution::new(p).unwrap()
            })
            .collect();
        assert!((score_mi_loss(&relabeled).unwrap() - base).abs() < 1e-12);
    }

    #[test]
    fn score_mi_lower_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..50 {
            let k = rng.gen_range(2..6);
            let n = rng.gen_range(1..20);
            let batch: Vec<ScoreDistribution> = (0..n)
                .map(|_| {
                    let raw: Vec<f64> = (0..k).map(|_| rng.gen_range(0.001..1.0)).collect();
                    let s: f64 = raw.iter().sum();
                    ScoreDistribution::new(raw.into_iter().map(|p| p / s).collect()).unwrap()
                })
                .collect();
            let v = score_mi_loss(&batch).unwrap();
            assert!(v >= -(k as f64).ln() - 1e-9);
            assert!(v <= 1e-9, "concavity forces a nonpositive value, got {v}");
        }
    }

    #[test]
    fn score_mi_errors() {
        assert!(matches!(score_mi_loss(&[]), Err(LossError::EmptyBatch)));
        let batch = vec![uniform(3), uniform(4)];
        assert!(matches!(
            score_mi_loss(&batch),
            Err(LossError::InconsistentClasses(3, 4))
        ));
    }

    #[test]
    fn score_distribution_validation() {
        assert!(ScoreDistribution::new(vec![1.0]).is_err());
        assert!(ScoreDistribution::new(vec![0.6, 0.6]).is_err());
        assert_eq!(one_hot(4, 2).hard_class(), 2);
        // ties break toward the lowest index
        let tied = ScoreDistribution::new(vec![0.4, 0.4, 0.2]).unwrap();
        assert_eq!(tied.hard_class(), 0);
    }

    #[test]
    fn triplet_hand_values() {
        let w = LossWeights {
            margin: 1.0,
            lambda_skew: 0.5,
            ..Default::default()
        };
        let a = GaussianDiag::scalar(0.0, 1.0).unwrap();
        let p = GaussianDiag::scalar(0.5, 1.0).unwrap();
        let n = GaussianDiag::scalar(3.0, 1.0).unwrap();

        // hinge inactive: positive coincides with the anchor, negative far
        assert_eq!(triplet_sqrt_js(&a, &a, &n, &w).unwrap(), 0.0);

        // positive == negative: distances cancel, the margin survives
        assert_eq!(triplet_sqrt_js(&a, &p, &p, &w).unwrap(), 1.0);

        // hand-computed: means 0 / 0.5 / 3 with unit variances give
        // distances delta / (2 sqrt 2)
        let v = triplet_sqrt_js(&a, &p, &n, &w).unwrap();
        let expect = 0.5 / (2.0 * 2.0f64.sqrt()) - 3.0 / (2.0 * 2.0f64.sqrt()) + 1.0;
        assert!((v - expect).abs() < 1e-12);
        assert!((v - 0.11612).abs() < 1e-5);
    }

    #[test]
    fn triplet_zero_when_separation_exceeds_margin() {
        let w = LossWeights {
            margin: 0.5,
            lambda_skew: 0.5,
            ..Default::default()
        };
        let a = GaussianDiag::scalar(0.0, 1.0).unwrap();
        let p = GaussianDiag::scalar(0.1, 1.0).unwrap();
        for neg_mean in [2.0, 5.0, 10.0] {
            let n = GaussianDiag::scalar(neg_mean, 1.0).unwrap();
            assert_eq!(triplet_sqrt_js(&a, &p, &n, &w).unwrap(), 0.0);
        }
    }

    #[test]
    fn triplet_batch_reductions() {
        let w = LossWeights {
            margin: 1.0,
            lambda_skew: 0.5,
            ..Default::default()
        };
        let posts = vec![
            GaussianDiag::scalar(0.0, 1.0).unwrap(),
            GaussianDiag::scalar(0.5, 1.0).unwrap(),
            GaussianDiag::scalar(3.0, 1.0).unwrap(),
        ];
        let trips = vec![
            Triplet {
                anchor: 0,
                positive: 1,
                negative: 2,
            },
            Triplet {
                anchor: 0,
                positive: 1,
                negative: 2,
            },
        ];
        let sum = triplet_sqrt_js_batch(&posts, &trips, &w, TripletReduction::Sum).unwrap();
        let mean = triplet_sqrt_js_batch(&posts, &trips, &w, TripletReduction::Mean).unwrap();
        assert!((sum - 2.0 * mean).abs() < 1e-15);
        assert_eq!(
            triplet_sqrt_js_batch(&posts, &[], &w, TripletReduction::Sum).unwrap(),
            0.0
        );
    }

    #[test]
    fn total_loss_cases() {
        let parts = LossParts {
            recon: 1.0,
            prior_kl: 2.0,
            triplet: 0.5,
            side: 0.3,
            score: -0.2,
        };
        let w = LossWeights {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
            delta: 1.0,
            zeta: 1.0,
            ..Default::default()
        };
        let b = total_loss(&parts, &w).unwrap();
        assert!((b.total - 3.6).abs() < 1e-12);

        let zero = LossWeights {
            alpha: 0.0,
            beta: 0.0,
            gamma: 0.0,
            delta: 0.0,
            zeta: 0.0,
            ..Default::default()
        };
        assert_eq!(total_loss(&parts, &zero).unwrap().total, 0.0);

        let only_recon = LossWeights {
            alpha: 1.0,
            beta: 0.0,
            gamma: 0.0,
            delta: 0.0,
            zeta: 0.0,
            ..Default::default()
        };
        let parts2 = LossParts {
            recon: 0.7,
            prior_kl: 9.0,
            triplet: 9.0,
            side: 9.0,
            score: 9.0,
        };
        assert!((total_loss(&parts2, &only_recon).unwrap().total - 0.7).abs() < 1e-15);

        let bad = LossParts {
            recon: f64::NAN,
            ..parts
        };
        assert!(matches!(
            total_loss(&bad, &w),
            Err(LossError::NonFinite("recon"))
        ));
    }

    #[test]
    fn total_loss_linear_in_each_weight() {
        let parts = LossParts {
            recon: 0.9,
            prior_kl: 1.7,
            triplet: 0.25,
            side: 0.4,
            score: -0.6,
        };
        let base = LossWeights::default();
        let component = [
            parts.recon,
            parts.prior_kl,
            parts.triplet,
            parts.side,
            parts.score,
        ];
        for i in 0..5 {
            let mut lo = base;
            let mut hi = base;
            let (lo_w, hi_w) = (0.3, 0.9);
            match i {
                0 => {
                    lo.alpha = lo_w;
                    hi.alpha = hi_w;
                }
                1 => {
                    lo.beta = lo_w;
                    hi.beta = hi_w;
                }
                2 => {
                    lo.gamma = lo_w;
                    hi.gamma = hi_w;
                }
                3 => {
                    lo.delta = lo_w;
                    hi.delta = hi_w;
                }
                _ => {
                    lo.zeta = lo_w;
                    hi.zeta = hi_w;
                }
            }
            let slope = (total_loss(&parts, &hi).unwrap().total
                - total_loss(&parts, &lo).unwrap().total)
                / (hi_w - lo_w);
            assert!(
                (slope - component[i]).abs() < 1e-9,
                "component {i}: slope {slope}"
            );
        }
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::default().validate().is_ok());
        assert!(LossWeights {
            alpha: -0.1,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(LossWeights {
            lambda_skew: 1.4,
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    // ---- agreement and gradient checks of the tape builders ----

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.gen_range(lo..hi))
    }

    #[test]
    fn graph_values_match_pure_losses() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        // bernoulli from logits vs pure on probabilities
        let logits = rand_mat(&mut rng, 4, 6, -2.0, 2.0);
        let x = rand_mat(&mut rng, 4, 6, 0.0, 1.0);
        let mut t = Tape::new();
        let lv = t.constant(logits.clone());
        let out = graph::bernoulli_nll_from_logits(&mut t, lv, &x);
        let probs = logits.mapv(|l| 1.0 / (1.0 + (-l).exp()));
        let pure = reconstruction_nll_batch(&x, &probs, Likelihood::Bernoulli).unwrap();
        assert!((t.scalar_value(out) - pure).abs() < 1e-9);

        // gaussian recon
        let mean = rand_mat(&mut rng, 4, 6, -1.0, 1.0);
        let xg = rand_mat(&mut rng, 4, 6, -1.0, 1.0);
        let mut t = Tape::new();
        let mv = t.constant(mean.clone());
        let out = graph::gaussian_unit_var_nll(&mut t, mv, &xg);
        let pure = reconstruction_nll_batch(&xg, &mean, Likelihood::GaussianUnitVar).unwrap();
        assert!((t.scalar_value(out) - pure).abs() < 1e-9);

        // prior KL
        let mu = rand_mat(&mut rng, 5, 3, -2.0, 2.0);
        let var = rand_mat(&mut rng, 5, 3, 0.2, 3.0);
        let mut t = Tape::new();
        let muv = t.constant(mu.clone());
        let varv = t.constant(var.clone());
        let out = graph::prior_kl_graph(&mut t, muv, varv);
        let posts: Vec<GaussianDiag> = (0..5)
            .map(|i| GaussianDiag::new(mu.row(i).to_vec(), var.row(i).to_vec()).unwrap())
            .collect();
        assert!((t.scalar_value(out) - prior_kl_batch(&posts).unwrap()).abs() < 1e-12);

        // score MI loss
        let logits = rand_mat(&mut rng, 7, 4, -3.0, 3.0);
        let mut t = Tape::new();
        let lv = t.constant(logits.clone());
        let out = graph::score_mi_graph(&mut t, lv);
        let dists: Vec<ScoreDistribution> = logits
            .rows()
            .into_iter()
            .map(|row| {
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = row.iter().map(|&l| (l - mx).exp()).collect();
                let s: f64 = e.iter().sum();
                ScoreDistribution::new(e.into_iter().map(|p| p / s).collect()).unwrap()
            })
            .collect();
        assert!((t.scalar_value(out) - score_mi_loss(&dists).unwrap()).abs() < 1e-9);

        // js rows vs the divergence closed form
        let mu1 = rand_mat(&mut rng, 6, 3, -2.0, 2.0);
        let v1 = rand_mat(&mut rng, 6, 3, 0.2, 3.0);
        let mu2 = rand_mat(&mut rng, 6, 3, -2.0, 2.0);
        let v2 = rand_mat(&mut rng, 6, 3, 0.2, 3.0);
        let lam = 0.35;
        let mut t = Tape::new();
        let a = t.constant(mu1.clone());
        let b = t.constant(v1.clone());
        let c = t.constant(mu2.clone());
        let d = t.constant(v2.clone());
        let js = graph::js_geo_rows_graph(&mut t, a, b, c, d, lam);
        for i in 0..6 {
            let p = GaussianDiag::new(mu1.row(i).to_vec(), v1.row(i).to_vec()).unwrap();
            let q = GaussianDiag::new(mu2.row(i).to_vec(), v2.row(i).to_vec()).unwrap();
            let expect = divergence::js_geo(&p, &q, SkewParam::new(lam).unwrap()).unwrap();
            assert!((t.value(js)[(i, 0)] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn all_five_loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let n_points = 50;

        // reconstruction (bernoulli from logits)
        for _ in 0..n_points {
            let x = rand_mat(&mut rng, 3, 4, 0.0, 1.0);
            let l0 = rand_mat(&mut rng, 3, 4, -2.0, 2.0);
            let worst = max_rel_error(
                &l0,
                1e-5,
                1e-6,
                |l| {
                    let mut t = Tape::new();
                    let lv = t.constant(l.clone());
                    let out = graph::bernoulli_nll_from_logits(&mut t, lv, &x);
                    t.scalar_value(out)
                },
                |l| {
                    let mut t = Tape::new();
                    let lv = t.param(l.clone());
                    let out = graph::bernoulli_nll_from_logits(&mut t, lv, &x);
                    t.backward(out);
                    t.grad(lv).clone()
                },
            );
            assert!(worst <= 1e-4, "recon gradient: {worst:.2e}");
        }

        // prior KL wrt mean and variance jointly (variance kept positive)
        for _ in 0..n_points {
            let mu = rand_mat(&mut rng, 2, 3, -2.0, 2.0);
            let var = rand_mat(&mut rng, 2, 3, 0.3, 2.5);
            let packed = ndarray::concatenate(ndarray::Axis(1), &[mu.view(), var.view()]).unwrap();
            let run = |p: &Array2<f64>| {
                let mu = p.slice(ndarray::s![.., 0..3]).to_owned();
                let var = p.slice(ndarray::s![.., 3..6]).to_owned();
                let mut t = Tape::new();
                let muv = t.param(mu);
                let varv = t.param(var);
                let out = graph::prior_kl_graph(&mut t, muv, varv);
                (t, muv, varv, out)
            };
            let worst = max_rel_error(
                &packed,
                1e-5,
                1e-6,
                |p| {
                    let (t, _, _, out) = run(p);
                    t.scalar_value(out)
                },
                |p| {
                    let (mut t, muv, varv, out) = run(p);
                    t.backward(out);
                    ndarray::concatenate(
                        ndarray::Axis(1),
                        &[t.grad(muv).view(), t.grad(varv).view()],
                    )
                    .unwrap()
                },
            );
            assert!(worst <= 1e-4, "prior KL gradient: {worst:.2e}");
        }

        // side cross-entropy on logits
        for _ in 0..n_points {
            let l0 = rand_mat(&mut rng, 4, 3, -2.0, 2.0);
            let classes = vec![0usize, 2, 1, 0];
            let worst = max_rel_error(
                &l0,
                1e-5,
                1e-6,
                |l| {
                    let mut t = Tape::new();
                    let lv = t.constant(l.clone());
                    let out = graph::categorical_ce_graph(&mut t, lv, &classes);
                    t.scalar_value(out)
                },
                |l| {
                    let mut t = Tape::new();
                    let lv = t.param(l.clone());
                    let out = graph::categorical_ce_graph(&mut t, lv, &classes);
                    t.backward(out);
                    t.grad(lv).clone()
                },
            );
            assert!(worst <= 1e-4, "side CE gradient: {worst:.2e}");
        }

        // score MI on logits
        for _ in 0..n_points {
            let l0 = rand_mat(&mut rng, 5, 4, -2.0, 2.0);
            let worst = max_rel_error(
                &l0,
                1e-5,
                1e-6,
                |l| {
                    let mut t = Tape::new();
                    let lv = t.constant(l.clone());
                    let out = graph::score_mi_graph(&mut t, lv);
                    t.scalar_value(out)
                },
                |l| {
                    let mut t = Tape::new();
                    let lv = t.param(l.clone());
                    let out = graph::score_mi_graph(&mut t, lv);
                    t.backward(out);
                    t.grad(lv).clone()
                },
            );
            assert!(worst <= 1e-4, "score MI gradient: {worst:.2e}");
        }

        // triplet hinge wrt means and variances (margin keeps the hinge active)
        let trips = vec![Triplet {
            anchor: 0,
            positive: 1,
            negative: 2,
        }];
        for _ in 0..n_points {
            let mu = rand_mat(&mut rng, 3, 2, -1.0, 1.0);
            let var = rand_mat(&mut rng, 3, 2, 0.4, 2.0);
            let packed = ndarray::concatenate(ndarray::Axis(1), &[mu.view(), var.view()]).unwrap();
            let run = |p: &Array2<f64>| {
                let mu = p.slice(ndarray::s![.., 0..2]).to_owned();
                let var = p.slice(ndarray::s![.., 2..4]).to_owned();
                let mut t = Tape::new();
                let muv = t.param(mu);
                let varv = t.param(var);
                let out = graph::triplet_graph(
                    &mut t,
                    muv,
                    varv,
                    &trips,
                    0.5,
                    2.0,
                    TripletReduction::Sum,
                );
                (t, muv, varv, out)
            };
            let worst = max_rel_error(
                &packed,
                1e-5,
                1e-6,
                |p| {
                    let (t, _, _, out) = run(p);
                    t.scalar_value(out)
                },
                |p| {
                    let (mut t, muv, varv, out) = run(p);
                    t.backward(out);
                    ndarray::concatenate(
                        ndarray::Axis(1),
                        &[t.grad(muv).view(), t.grad(varv).view()],
                    )
                    .unwrap()
                },
            );
            assert!(worst <= 1e-4, "triplet gradient: {worst:.2e}");
        }
    }

    #[test]
    fn gaussian_side_graph_matches_pure() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mean = rand_mat(&mut rng, 6, 1, -1.0, 1.0);
        let var = rand_mat(&mut rng, 6, 1, 0.3, 2.0);
        let obs = rand_mat(&mut rng, 6, 1, -1.0, 1.0);
        let mut t = Tape::new();
        let mv = t.constant(mean.clone());
        let vv = t.constant(var.clone());
        let out = graph::gaussian_side_nll_graph(&mut t, mv, vv, &obs);
        let preds: Vec<SidePrediction> = (0..6)
            .map(|i| SidePrediction::Continuous {
                mean: mean[(i, 0)],
                var: var[(i, 0)],
            })
            .collect();
        let observed: Vec<SideObservation> = (0..6)
            .map(|i| SideObservation::Value(obs[(i, 0)]))
            .collect();
        let pure = side_nll_batch(&preds, &observed).unwrap();
        assert!((t.scalar_value(out) - pure).abs() < 1e-12);
    }

    #[test]
    fn loss_breakdown_is_exact_weighted_sum() {
        let w = LossWeights {
            alpha: 0.5,
            beta: 2.0,
            gamma: 1.5,
            delta: 0.25,
            zeta: 3.0,
            ..Default::default()
        };
        let parts = LossParts {
            recon: 0.1,
            prior_kl: 0.2,
            triplet: 0.3,
            side: 0.4,
            score: 0.5,
        };
        let b = total_loss(&parts, &w).unwrap();
        let manual = 0.5 * 0.1 + 2.0 * 0.2 + 1.5 * 0.3 + 0.25 * 0.4 + 3.0 * 0.5;
        assert_eq!(b.total, manual);
    }
}
