//! Side-information ablation on MNIST: the labels themselves ("pure"),
//! label pairs, and a heterogeneous grouping, each driving the side head
//! and triplet mining of the same architecture. Writes a latent scatter
//! per variant.
//!
//! Needs the MNIST IDX files; see the README section "Fetching the
//! datasets". Point `SIDESCORE_DATA` at the directory holding them
//! (default `./data`).
//!
//! ```text
//! cargo run --release --example mnist_ablation
//! ```

use std::path::{Path, PathBuf};

use sidescore::cli::{evaluate_model, model_spec_for, prepare_data};
use sidescore::config::{DataConfig, RunConfig};
use sidescore::data::{SideInfo, SideMap};
use sidescore::eval::pca_project;
use sidescore::plot::{scatter, ColorSpec};
use sidescore::trainer::train;

fn data_dir() -> PathBuf {
    std::env::var("SIDESCORE_DATA")
        .map(PathBuf::from)
        .unwrap_or_else(|_| PathBuf::from("data"))
}

fn main() -> sidescore::Result<()> {
    let images = data_dir().join("train-images-idx3-ubyte");
    let labels = data_dir().join("train-labels-idx1-ubyte");
    if !images.is_file() {
        eprintln!(
            "MNIST not found at {}; fetch it first (see README 'Fetching the datasets')",
            images.display()
        );
        return Ok(());
    }

    std::fs::create_dir_all("runs")?;
    for (name, map) in [
        ("pure", SideMap::Pure),
        ("pairs", SideMap::Pairs),
        ("heterogeneous", SideMap::Heterogeneous),
    ] {
        let mut cfg =
            RunConfig::from_toml_file(Path::new("crates/sidescore/configs/mnist_pairs.toml"))?;
        if let DataConfig::Idx {
            images: i,
            labels: l,
            side_map,
            ..
        } = &mut cfg.data
        {
            *i = images.clone();
            *l = labels.clone();
            *side_map = Some(map);
        }
        let prepared = prepare_data(&cfg)?;
        let spec = model_spec_for(&cfg, &prepared);
        println!(
            "== side map '{name}': {} side classes ==",
            match prepared.train.side() {
                Some(SideInfo::Categorical { n_classes, .. }) => *n_classes,
                _ => 0,
            }
        );
        let (model, _) = train(&spec, &prepared.train, &cfg.train_config())?;
        let report = evaluate_model(&model, &prepared.train, &prepared.test)?;
        println!(
            "  held-out side accuracy {:.3}, 10-class score accuracy {:.3}",
            report.side_holdout_accuracy.unwrap_or(f64::NAN),
            report.score_cluster_accuracy
        );

        let mu = model.embed_batch(prepared.test.features())?;
        let proj = pca_project(&mu, 2).map_err(sidescore::Error::Eval)?;
        let digits: Vec<usize> = prepared
            .test
            .eval_labels()
            .expect("labels present")
            .values()
            .iter()
            .map(|&v| v as usize)
            .collect();
        let out = PathBuf::from(format!("runs/mnist_latent_{name}.png"));
        scatter(&proj.points, &ColorSpec::Categorical(digits), &out)?;
        println!("  latent scatter (colored by digit) -> {}", out.display());
    }
    Ok(())
}
