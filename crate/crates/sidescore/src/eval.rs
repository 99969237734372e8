//! Score-quality metrics and latent-space projection.

use ndarray::Array2;
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("empty input")]
    Empty,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("zero variance in {0}")]
    ZeroVariance(&'static str),
    #[error("projection dimension {out} exceeds input dimension {d}")]
    BadProjection { out: usize, d: usize },
}

type Result<T> = std::result::Result<T, EvalError>;

/// Exact solution of the square assignment problem (cost minimization);
/// returns for each column the assigned row. Standard shortest-path
/// Hungarian with potentials, O(n^3).
fn hungarian_min(cost: &Array2<f64>) -> Vec<usize> {
    let n = cost.nrows();
    debug_assert_eq!(n, cost.ncols());
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1]; // p[j]: row matched to column j (1-based)
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_of_col = vec![0usize; n];
    for j in 1..=n {
        row_of_col[j - 1] = p[j] - 1;
    }
    row_of_col
}

/// Classification accuracy maximized over injective mappings from
/// predicted class ids to true class ids (exact assignment, never greedy).
/// Invariant under any permutation of the predicted ids.
pub fn cluster_accuracy(predicted: &[usize], truth: &[usize]) -> Result<f64> {
    if predicted.is_empty() {
        return Err(EvalError::Empty);
    }
    if predicted.len() != truth.len() {
        return Err(EvalError::LengthMismatch(predicted.len(), truth.len()));
    }
    let kp = predicted.iter().max().unwrap() + 1;
    let kt = truth.iter().max().unwrap() + 1;
    let k = kp.max(kt);
    let mut counts = Array2::<f64>::zeros((k, k));
    for (&p, &t) in predicted.iter().zip(truth) {
        counts[(p, t)] += 1.0;
    }
    // maximize matches == minimize (max - count)
    let maxc = counts.iter().cloned().fold(0.0f64, f64::max);
    let cost = counts.mapv(|c| maxc - c);
    let row_of_col = hungarian_min(&cost);
    let mut matched = 0.0;
    for (col, &row) in row_of_col.iter().enumerate() {
        matched += counts[(row, col)];
    }
    Ok(matched / predicted.len() as f64)
}

/// Pearson correlation with a two-sided p-value from the t statistic on
/// `n - 2` degrees of freedom.
pub fn pearson_r(scores: &[f64], targets: &[f64]) -> Result<(f64, f64)> {
    let n = scores.len();
    if n != targets.len() {
        return Err(EvalError::LengthMismatch(n, targets.len()));
    }
    if n < 3 {
        return Err(EvalError::TooFewPoints { needed: 3, got: n });
    }
    let nf = n as f64;
    let mean_x = scores.iter().sum::<f64>() / nf;
    let mean_y = targets.iter().sum::<f64>() / nf;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for i in 0..n {
        let dx = scores[i] - mean_x;
        let dy = targets[i] - mean_y;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    if sxx <= 0.0 {
        return Err(EvalError::ZeroVariance("scores"));
    }
    if syy <= 0.0 {
        return Err(EvalError::ZeroVariance("targets"));
    }
    let r = (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0);
    let df = nf - 2.0;
    let p = if r.abs() >= 1.0 {
        0.0
    } else {
        let t = r.abs() * (df / (1.0 - r * r)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).expect("valid dof");
        2.0 * (1.0 - dist.cdf(t))
    };
    Ok((r, p))
}

/// Relabel score classes by ascending mean of a reference signal,
/// producing a per-class ordinal value (0..K-1 as reals). Classes absent
/// from the reference inherit the mean of the nearest present class by
/// index distance (ties toward the lower index), then sort stably.
///
/// The reference is side information from the training split only; the
/// alignment fixes the arbitrary orientation of the score ids without
/// ever touching evaluation labels.
pub fn align_score_order(
    score_classes: &[usize],
    reference: &[f64],
    n_classes: usize,
) -> Result<Vec<f64>> {
    if score_classes.is_empty() {
        return Err(EvalError::Empty);
    }
    if score_classes.len() != reference.len() {
        return Err(EvalError::LengthMismatch(
            score_classes.len(),
            reference.len(),
        ));
    }
    let mut sums = vec![0.0f64; n_classes];
    let mut counts = vec![0usize; n_classes];
    for (&c, &r) in score_classes.iter().zip(reference) {
        sums[c] += r;
        counts[c] += 1;
    }
    let mut means = vec![f64::NAN; n_classes];
    for c in 0..n_classes {
        if counts[c] > 0 {
            means[c] = sums[c] / counts[c] as f64;
        }
    }
    // absent classes inherit the nearest present class mean
    for c in 0..n_classes {
        if means[c].is_nan() {
            let nearest = (0..n_classes)
                .filter(|&j| counts[j] > 0)
                .min_by_key(|&j| (j as isize - c as isize).unsigned_abs())
                .ok_or(EvalError::Empty)?;
            means[c] = means[nearest];
        }
    }
    let mut order: Vec<usize> = (0..n_classes).collect();
    order.sort_by(|&a, &b| {
        means[a]
            .partial_cmp(&means[b])
            .expect("finite means")
            .then(a.cmp(&b))
    });
    let mut ordinal = vec![0.0f64; n_classes];
    for (rank, &class) in order.iter().enumerate() {
        ordinal[class] = rank as f64;
    }
    Ok(ordinal)
}

/// Expected ordinal score of one probability vector under a class->ordinal
/// table, giving a continuous score for correlation analysis.
pub fn expected_ordinal(probs: &[f64], ordinal: &[f64]) -> f64 {
    probs.iter().zip(ordinal).map(|(p, o)| p * o).sum()
}

/// Result of a PCA projection.
#[derive(Debug, Clone)]
pub struct PcaProjection {
    /// N x out_dim projected coordinates
    pub points: Array2<f64>,
    /// fraction of total variance captured per returned component
    pub explained: Vec<f64>,
    /// true when the data rank was below the requested dimension and a
    /// zero component was padded in
    pub rank_deficient: bool,
}

/// Jacobi eigendecomposition of a symmetric matrix; returns eigenvalues
/// and column eigenvectors.
fn jacobi_eigen(mat: &Array2<f64>) -> (Vec<f64>, Array2<f64>) {
    let d = mat.nrows();
    let mut a = mat.clone();
    let mut v = Array2::<f64>::eye(d);
    for _sweep in 0..200 {
        let mut off = 0.0;
        for i in 0..d {
            for j in i + 1..d {
                off += a[(i, j)] * a[(i, j)];
            }
        }
        if off < 1e-24 {
            break;
        }
        for p in 0..d {
            for q in p + 1..d {
                if a[(p, q)].abs() < 1e-30 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * a[(p, q)]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..d {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                for k in 0..d {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    let eig: Vec<f64> = (0..d).map(|i| a[(i, i)]).collect();
    (eig, v)
}

/// Centered projection onto the top principal components, ordered by
/// descending variance. Sign convention: the largest-magnitude loading of
/// each component is positive. Rank deficiency pads zero components and
/// raises the flag instead of failing.
pub fn pca_project(embeddings: &Array2<f64>, out_dim: usize) -> Result<PcaProjection> {
    let n = embeddings.nrows();
    let d = embeddings.ncols();
    if n < 2 {
        return Err(EvalError::TooFewPoints { needed: 2, got: n });
    }
    if out_dim > d {
        return Err(EvalError::BadProjection { out: out_dim, d });
    }
    let mut centered = embeddings.clone();
    for j in 0..d {
        let m = centered.column(j).sum() / n as f64;
        centered.column_mut(j).mapv_inplace(|x| x - m);
    }
    let cov = centered.t().dot(&centered) / (n as f64);
    let (eig, vecs) = jacobi_eigen(&cov);
    let total: f64 = eig.iter().map(|&e| e.max(0.0)).sum();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig[b].partial_cmp(&eig[a]).expect("finite eigenvalues"));

    let rank_tol = 1e-12 * total.max(1e-300);
    let mut components = Array2::<f64>::zeros((d, out_dim));
    let mut explained = Vec::with_capacity(out_dim);
    let mut rank_deficient = false;
    for (c, &ei) in order.iter().take(out_dim).enumerate() {
        let lam = eig[ei].max(0.0);
        if lam <= rank_tol {
            rank_deficient = true;
            explained.push(0.0);
            continue; // leave a zero component
        }
        let mut col: Vec<f64> = (0..d).map(|r| vecs[(r, ei)]).collect();
        // fix the sign so the largest-magnitude loading is positive
        let mut big = 0usize;
        for (k, x) in col.iter().enumerate() {
            if x.abs() > col[big].abs() {
                big = k;
            }
        }
        if col[big] < 0.0 {
            for x in &mut col {
                *x = -*x;
            }
        }
        for r in 0..d {
            components[(r, c)] = col[r];
        }
        explained.push(if total > 0.0 { lam / total } else { 0.0 });
    }
    let points = centered.dot(&components);
    Ok(PcaProjection {
        points,
        explained,
        rank_deficient,
    })
}
