//! Mining of (anchor, positive, negative) triples from a batch.
//!
//! Three supervision regimes are supported: same-class sampling when
//! categorical side information is available, quantile binning for
//! continuous side information, and self-supervision via augmented views.
//! Sampling is uniform over eligible combinations, with replacement;
//! a fixed seed reproduces the exact triplet list.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TripletError {
    #[error("need at least two distinct classes, found {0}")]
    SingleClass(usize),
    #[error("need at least {needed} distinct side values, found {found}")]
    TooFewDistinctValues { needed: usize, found: usize },
    #[error("side values must be finite")]
    NonFiniteValue,
    #[error("batch of {0} is too small for self-supervised mining")]
    BatchTooSmall(usize),
    #[error("quantile mining needs at least two bins, got {0}")]
    TooFewBins(usize),
}

type Result<T> = std::result::Result<T, TripletError>;

/// Index triple into the current batch. The eligibility relation of the
/// mining regime holds for (anchor, positive) and fails for
/// (anchor, negative); `anchor != positive` always.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

/// Same-class positives, different-class negatives.
///
/// Classes with a single member are skipped as anchor sources. When no
/// class is anchor-eligible the shortfall is reported via a warning and
/// an empty list is returned rather than padding with invalid triples.
pub fn mine_by_class(side_classes: &[usize], n_triplets: usize, seed: u64) -> Result<Vec<Triplet>> {
    let n = side_classes.len();
    let mut by_class: Vec<(usize, Vec<usize>)> = Vec::new();
    for (i, &c) in side_classes.iter().enumerate() {
        match by_class.iter_mut().find(|(cls, _)| *cls == c) {
            Some((_, members)) => members.push(i),
            None => by_class.push((c, vec![i])),
        }
    }
    if by_class.len() < 2 {
        return Err(TripletError::SingleClass(by_class.len()));
    }
    // a class is anchor-eligible when it can supply a distinct positive
    // and at least one outside negative exists
    let eligible: Vec<&(usize, Vec<usize>)> = by_class
        .iter()
        .filter(|(_, m)| m.len() >= 2 && n - m.len() >= 1)
        .collect();
    if eligible.is_empty() {
        log::warn!(
            "triplet mining: requested {n_triplets}, produced 0 (no class has >= 2 members)"
        );
        return Ok(Vec::new());
    }
    // weight classes by their count of eligible (a, p, n) combinations
    let combo_counts: Vec<f64> = eligible
        .iter()
        .map(|(_, m)| (m.len() * (m.len() - 1) * (n - m.len())) as f64)
        .collect();
    let total: f64 = combo_counts.iter().sum();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_triplets);
    for _ in 0..n_triplets {
        let mut pick = rng.gen_range(0.0..total);
        let mut ci = 0;
        for (i, &w) in combo_counts.iter().enumerate() {
            if pick < w {
                ci = i;
                break;
            }
            pick -= w;
            ci = i;
        }
        let (class, members) = eligible[ci];
        let anchor = members[rng.gen_range(0..members.len())];
        let positive = loop {
            let p = members[rng.gen_range(0..members.len())];
            if p != anchor {
                break p;
            }
        };
        let negative = loop {
            let cand = rng.gen_range(0..n);
            if side_classes[cand] != *class {
                break cand;
            }
        };
        out.push(Triplet {
            anchor,
            positive,
            negative,
        });
    }
    Ok(out)
}

/// Quantile-bin continuous side values, then mine by bin id.
///
/// Bins are assigned by rank: a value whose first occurrence has sorted
/// rank `r` lands in bin `floor(r * n_bins / n)`, so tied values share
/// the lower bin and any strictly increasing transform of the values
/// yields identical bins.
pub fn mine_by_quantile(
    side_values: &[f64],
    n_bins: usize,
    n_triplets: usize,
    seed: u64,
) -> Result<Vec<Triplet>> {
    let bins = quantile_bins(side_values, n_bins)?;
    mine_by_class(&bins, n_triplets, seed)
}

/// The bin assignment used by [`mine_by_quantile`], exposed for reuse by
/// evaluation code that needs the same discretization.
pub fn quantile_bins(side_values: &[f64], n_bins: usize) -> Result<Vec<usize>> {
    if n_bins < 2 {
        return Err(TripletError::TooFewBins(n_bins));
    }
    if side_values.iter().any(|v| !v.is_finite()) {
        return Err(TripletError::NonFiniteValue);
    }
    let n = side_values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| side_values[a].partial_cmp(&side_values[b]).expect("finite"));
    // rank of the first occurrence of each distinct value
    let mut first_rank = std::collections::BTreeMap::new();
    let mut distinct = 0usize;
    for (rank, &i) in order.iter().enumerate() {
        let key = side_values[i].to_bits();
        first_rank.entry(key).or_insert_with(|| {
            distinct += 1;
            rank
        });
    }
    if distinct < n_bins {
        return Err(TripletError::TooFewDistinctValues {
            needed: n_bins,
            found: distinct,
        });
    }
    let mut bins = vec![0usize; n];
    for &i in &order {
        let r = first_rank[&side_values[i].to_bits()];
        bins[i] = r * n_bins / n;
    }
    Ok(bins)
}

/// Augmented-view generation for self-supervised mining.
#[derive(Debug, Clone)]
pub enum Augmentation {
    /// Add Gaussian noise scaled by `strength` times the per-feature
    /// standard deviation of the batch.
    FeatureJitter { strength: f64 },
    /// Shift image rows/columns by up to `max_shift` pixels (zero fill);
    /// rows hold channel-major `[h][w]` images.
    PixelShift {
        max_shift: usize,
        h: usize,
        w: usize,
    },
}

/// Positives are augmented copies of their anchors; negatives are other
/// batch instances. Returned triplets index into the concatenation
/// `[batch rows; augmented rows]`, i.e. `positive = batch_size + t` for
/// the `t`-th triplet. The augmented rows are returned alongside.
pub fn mine_self_supervised(
    batch: &Array2<f64>,
    augment: &Augmentation,
    n_triplets: usize,
    seed: u64,
) -> Result<(Vec<Triplet>, Array2<f64>)> {
    let n = batch.nrows();
    if n < 2 {
        return Err(TripletError::BatchTooSmall(n));
    }
    let d = batch.ncols();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut views = Array2::zeros((n_triplets, d));
    let mut out = Vec::with_capacity(n_triplets);

    // per-feature std for jitter scaling
    let feature_std: Vec<f64> = match augment {
        Augmentation::FeatureJitter { .. } => (0..d)
            .map(|j| {
                let col = batch.column(j);
                let mean = col.sum() / n as f64;
                (col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64).sqrt()
            })
            .collect(),
        _ => Vec::new(),
    };

    for t in 0..n_triplets {
        let anchor = rng.gen_range(0..n);
        let negative = loop {
            let c = rng.gen_range(0..n);
            if c != anchor {
                break c;
            }
        };
        let mut row = batch.row(anchor).to_owned();
        match augment {
            Augmentation::FeatureJitter { strength } => {
                for (j, x) in row.iter_mut().enumerate() {
                    let eps: f64 = StandardNormal.sample(&mut rng);
                    *x += strength * feature_std[j] * eps;
                }
            }
            Augmentation::PixelShift { max_shift, h, w } => {
                debug_assert_eq!(d, h * w);
                let shift = *max_shift as isize;
                let (dy, dx) = if shift == 0 {
                    (0, 0)
                } else {
                    (rng.gen_range(-shift..=shift), rng.gen_range(-shift..=shift))
                };
                let src = row.clone();
                for y in 0..*h {
                    for x in 0..*w {
                        let sy = y as isize - dy;
                        let sx = x as isize - dx;
                        row[y * w + x] =
                            if sy >= 0 && sy < *h as isize && sx >= 0 && sx < *w as isize {
                                src[sy as usize * w + sx as usize]
                            } else {
                                0.0
                            };
                    }
                }
            }
        }
        views.row_mut(t).assign(&row);
        out.push(Triplet {
            anchor,
            positive: n + t,
            negative,
        });
    }
    Ok((out, views))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn by_class_respects_constraints() {
        let classes = vec![0usize, 0, 1, 1];
        let trips = mine_by_class(&classes, 4, 7).unwrap();
        assert_eq!(trips.len(), 4);
        for t in &trips {
            assert_ne!(t.anchor, t.positive);
            assert_eq!(classes[t.anchor], classes[t.positive]);
            assert_ne!(classes[t.anchor], classes[t.negative]);
        }
    }

    #[test]
    fn by_class_single_class_errors() {
        let classes = vec![3usize, 3, 3];
        assert_eq!(
            mine_by_class(&classes, 2, 0),
            Err(TripletError::SingleClass(1))
        );
    }

    #[test]
    fn by_class_deterministic_under_seed() {
        let classes = vec![0usize, 1, 0, 2, 1, 0, 2, 2];
        let a = mine_by_class(&classes, 16, 99).unwrap();
        let b = mine_by_class(&classes, 16, 99).unwrap();
        assert_eq!(a, b);
        let c = mine_by_class(&classes, 16, 100).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn by_class_skips_singleton_anchor_classes() {
        // class 1 has a single member: it may appear as a negative but
        // never as an anchor or positive
        let classes = vec![0usize, 0, 1];
        let trips = mine_by_class(&classes, 10, 5).unwrap();
        assert_eq!(trips.len(), 10);
        for t in &trips {
            assert_eq!(classes[t.anchor], 0);
            assert_eq!(classes[t.positive], 0);
            assert_eq!(classes[t.negative], 1);
        }
    }

    #[test]
    fn by_class_all_singletons_yields_empty() {
        let classes = vec![0usize, 1, 2];
        let trips = mine_by_class(&classes, 5, 1).unwrap();
        assert!(trips.is_empty());
    }

    #[test]
    fn quantile_bins_four_point_example() {
        // brute force on the 4-point set: median splits {1,2} from {3,4}
        let bins = quantile_bins(&[1.0, 2.0, 3.0, 4.0], 2).unwrap();
        assert_eq!(bins, vec![0, 0, 1, 1]);
        let trips = mine_by_quantile(&[1.0, 2.0, 3.0, 4.0], 2, 8, 3).unwrap();
        for t in &trips {
            assert_eq!(bins[t.anchor], bins[t.positive]);
            assert_ne!(bins[t.anchor], bins[t.negative]);
        }
    }

    #[test]
    fn quantile_bins_monotone_invariance() {
        let vals = vec![0.3, -1.0, 2.5, 0.9, 0.31, -0.2, 1.7, 0.0];
        let transformed: Vec<f64> = vals.iter().map(|v| (v * 0.5f64).exp()).collect();
        assert_eq!(
            quantile_bins(&vals, 4).unwrap(),
            quantile_bins(&transformed, 4).unwrap()
        );
    }

    #[test]
    fn quantile_ties_go_to_lower_bin() {
        let vals = vec![1.0, 2.0, 2.0, 4.0];
        let bins = quantile_bins(&vals, 2).unwrap();
        assert_eq!(bins, vec![0, 0, 0, 1]);
    }

    #[test]
    fn quantile_degenerate_inputs() {
        assert_eq!(
            quantile_bins(&[5.0, 5.0, 5.0], 2),
            Err(TripletError::TooFewDistinctValues {
                needed: 2,
                found: 1
            })
        );
        // n_bins = number of points: every bin is a singleton, so mining
        // skips all anchors and reports an empty list
        let vals = vec![1.0, 2.0, 3.0, 4.0];
        let trips = mine_by_quantile(&vals, 4, 6, 2).unwrap();
        assert!(trips.is_empty());
    }

    #[test]
    fn self_supervised_zero_strength_copies_anchor() {
        let batch = Array2::from_shape_vec((3, 2), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let (trips, views) = mine_self_supervised(
            &batch,
            &Augmentation::FeatureJitter { strength: 0.0 },
            5,
            11,
        )
        .unwrap();
        assert_eq!(trips.len(), 5);
        for (t, trip) in trips.iter().enumerate() {
            assert_eq!(trip.positive, 3 + t);
            assert_ne!(trip.negative, trip.anchor);
            assert_eq!(views.row(t), batch.row(trip.anchor));
        }
    }

    #[test]
    fn self_supervised_deterministic_views() {
        let batch = Array2::from_shape_fn((6, 4), |(i, j)| (i * 4 + j) as f64 * 0.1);
        let aug = Augmentation::FeatureJitter { strength: 0.1 };
        let (t1, v1) = mine_self_supervised(&batch, &aug, 8, 42).unwrap();
        let (t2, v2) = mine_self_supervised(&batch, &aug, 8, 42).unwrap();
        assert_eq!(t1, t2);
        assert_eq!(v1, v2);
    }

    #[test]
    fn self_supervised_pixel_shift() {
        // 3x3 single-pixel image: a shift moves the hot pixel, zero fill
        let mut img = vec![0.0; 9];
        img[4] = 1.0;
        let batch = Array2::from_shape_vec((2, 9), [img.clone(), img].concat()).unwrap();
        let aug = Augmentation::PixelShift {
            max_shift: 1,
            h: 3,
            w: 3,
        };
        let (trips, views) = mine_self_supervised(&batch, &aug, 4, 9).unwrap();
        assert_eq!(trips.len(), 4);
        for t in 0..4 {
            let total: f64 = views.row(t).sum();
            assert!(total <= 1.0 + 1e-12); // mass never created
        }
        // zero shift keeps the view identical
        let aug0 = Augmentation::PixelShift {
            max_shift: 0,
            h: 3,
            w: 3,
        };
        let (trips0, views0) = mine_self_supervised(&batch, &aug0, 3, 9).unwrap();
        for (t, trip) in trips0.iter().enumerate() {
            assert_eq!(views0.row(t), batch.row(trip.anchor));
        }
    }

    #[test]
    fn self_supervised_batch_too_small() {
        let batch = Array2::zeros((1, 4));
        assert!(matches!(
            mine_self_supervised(&batch, &Augmentation::FeatureJitter { strength: 0.1 }, 2, 0),
            Err(TripletError::BatchTooSmall(1))
        ));
    }
}
