//! Semi-supervised digit classification with 100 revealed labels: the
//! inferred score class is anchored to label ids by a cross-entropy term,
//! so test error is the direct mismatch rate on the official test files.
//!
//! Needs the MNIST IDX files (see README). At desk scale (10k training
//! images) expect single-digit error; the published full-scale setting
//! (60k images, longer schedule) is the extended, non-gating experiment.
//!
//! ```text
//! cargo run --release --example mnist_semi_supervised
//! ```

use std::path::{Path, PathBuf};

use sidescore::cli::select_labeled;
use sidescore::config::{DataConfig, RunConfig};
use sidescore::data::load_idx;
use sidescore::trainer::train_semi_supervised;

fn data_dir() -> PathBuf {
    std::env::var("SIDESCORE_DATA")
        .map(PathBuf::from)
        .unwrap_or_else(|_| PathBuf::from("data"))
}

fn main() -> sidescore::Result<()> {
    let d = data_dir();
    let train_images = d.join("train-images-idx3-ubyte");
    if !train_images.is_file() {
        eprintln!(
            "MNIST not found at {}; fetch it first (see README 'Fetching the datasets')",
            train_images.display()
        );
        return Ok(());
    }

    let mut cfg = RunConfig::from_toml_file(Path::new("crates/sidescore/configs/mnist_semi.toml"))?;
    if let DataConfig::Idx { images, labels, .. } = &mut cfg.data {
        *images = train_images;
        *labels = d.join("train-labels-idx1-ubyte");
    }
    let prepared = sidescore::cli::prepare_data(&cfg)?;
    let spec = sidescore::cli::model_spec_for(&cfg, &prepared);
    let semi = cfg.semi.clone().expect("semi section in config");
    let labels = select_labeled(
        &prepared.train,
        semi.n_labeled,
        semi.label_seed,
        spec.n_score_classes,
    )?;
    println!(
        "training on {} images, {} labeled",
        prepared.train.n(),
        labels.iter().filter(|l| l.is_some()).count()
    );

    let (model, history) =
        train_semi_supervised(&spec, &prepared.train, &labels, &cfg.train_config())?;
    let last = history.epochs.last().unwrap();
    println!(
        "final epoch: total {:.4}, labeled cross-entropy {:.4}",
        last.losses.total,
        last.labeled_ce.unwrap_or(0.0)
    );

    let test = load_idx(
        &d.join("t10k-images-idx3-ubyte"),
        &d.join("t10k-labels-idx1-ubyte"),
    )?;
    let predicted = model.score_classes(test.features())?;
    let truth = test.eval_labels().expect("test labels").values();
    let correct = predicted
        .iter()
        .zip(truth)
        .filter(|&(&p, &t)| p == t as usize)
        .count();
    let error = 1.0 - correct as f64 / truth.len() as f64;
    println!("test error with 100 labels: {:.2}%", 100.0 * error);
    Ok(())
}
