//! The semi-supervised variant: a handful of revealed labels anchor the
//! score head through a cross-entropy term while everything else trains
//! unsupervised. With class-anchored scores the error is the direct
//! mismatch rate, no assignment matching needed.
//!
//! ```text
//! cargo run --release --example semi_supervised_labels
//! ```

use sidescore::cli::select_labeled;
use sidescore::data::make_blobs;
use sidescore::losses::{LossWeights, TripletReduction};
use sidescore::model::{InputKind, ModelSpec, SideKind};
use sidescore::trainer::{train_semi_supervised, TrainConfig, TripletRegime};

fn main() -> sidescore::Result<()> {
    let full = make_blobs(100, 4, 2, 0.6, 9)?;
    let (train_ds, test_ds) = full.split(0.8, 7)?;

    let spec = ModelSpec {
        input_kind: InputKind::Tabular,
        input_dim: 2,
        latent_dim: 2,
        hidden_layers: vec![32],
        n_score_classes: 4,
        side_kind: SideKind::Categorical { n_classes: 4 },
    };
    // reveal 5 labels per class out of 320 training rows
    let labels = select_labeled(&train_ds, 20, 1, 4)?;
    println!(
        "revealed {} labels out of {} training rows",
        labels.iter().filter(|l| l.is_some()).count(),
        train_ds.n()
    );

    let cfg = TrainConfig {
        epochs: 40,
        batch_size: 64,
        learning_rate: 2e-3,
        seed: 42,
        weights: LossWeights {
            beta: 0.2,
            ..Default::default()
        },
        triplet_regime: TripletRegime::ByClass,
        triplet_reduction: TripletReduction::Mean,
        labeled_weight: Some(10.0),
        ..Default::default()
    };
    let (model, history) = train_semi_supervised(&spec, &train_ds, &labels, &cfg)?;
    let last = history.epochs.last().unwrap();
    println!(
        "final epoch: total {:.4}, labeled cross-entropy {:.4}",
        last.losses.total,
        last.labeled_ce.unwrap_or(0.0)
    );

    let predicted = model.score_classes(test_ds.features())?;
    let truth = test_ds.eval_labels().expect("fixture labels").values();
    let correct = predicted
        .iter()
        .zip(truth)
        .filter(|&(&p, &t)| p == t as usize)
        .count();
    println!(
        "direct test accuracy with 20 revealed labels: {:.3}",
        correct as f64 / truth.len() as f64
    );
    Ok(())
}
