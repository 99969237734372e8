//! Severity scoring on the telemonitoring voice recordings: motor UPDRS
//! (a component of clinical severity) is the side information, and the
//! learned score is validated against the held-out total UPDRS. Also
//! renders the side-information / inferred-side-information latent pair.
//!
//! Needs `parkinsons_updrs.data` (see README 'Fetching the datasets').
//!
//! ```text
//! cargo run --release --example parkinson_score
//! ```

use std::path::{Path, PathBuf};

use sidescore::cli::{evaluate_model, model_spec_for, prepare_data};
use sidescore::config::{DataConfig, RunConfig};
use sidescore::data::SideInfo;
use sidescore::eval::pca_project;
use sidescore::losses::SidePrediction;
use sidescore::plot::{scatter, ColorSpec};
use sidescore::trainer::train;

fn main() -> sidescore::Result<()> {
    let data_file = std::env::var("SIDESCORE_DATA")
        .map(PathBuf::from)
        .unwrap_or_else(|_| PathBuf::from("data"))
        .join("parkinsons_updrs.data");
    if !data_file.is_file() {
        eprintln!(
            "telemonitoring data not found at {}; fetch it first (see README)",
            data_file.display()
        );
        return Ok(());
    }

    let mut cfg = RunConfig::from_toml_file(Path::new("crates/sidescore/configs/parkinsons.toml"))?;
    if let DataConfig::Csv { path, .. } = &mut cfg.data {
        *path = data_file;
    }
    let prepared = prepare_data(&cfg)?;
    let spec = model_spec_for(&cfg, &prepared);
    println!(
        "{} train rows, {} test rows, {} features",
        prepared.train.n(),
        prepared.test.n(),
        spec.input_dim
    );

    let (model, _) = train(&spec, &prepared.train, &cfg.train_config())?;
    let report = evaluate_model(&model, &prepared.train, &prepared.test)?;
    print!(
        "\nheld-out metrics (targets are the unseen total UPDRS):\n{}",
        report.to_text()
    );

    // side vs inferred side in the latent space
    let mu = model.embed_batch(prepared.test.features())?;
    let proj = pca_project(&mu, 2).map_err(sidescore::Error::Eval)?;
    let true_side = match prepared.test.side() {
        Some(SideInfo::Continuous(v)) => v.clone(),
        _ => vec![0.0; prepared.test.n()],
    };
    let inferred: Vec<f64> = model
        .predict_side_batch(&mu)?
        .into_iter()
        .map(|p| match p {
            SidePrediction::Continuous { mean, .. } => mean,
            _ => f64::NAN,
        })
        .collect();
    std::fs::create_dir_all("runs")?;
    scatter(
        &proj.points,
        &ColorSpec::Continuous(true_side),
        Path::new("runs/parkinson_side.png"),
    )?;
    scatter(
        &proj.points,
        &ColorSpec::Continuous(inferred),
        Path::new("runs/parkinson_side_inferred.png"),
    )?;
    println!("\nlatent scatters -> runs/parkinson_side.png, runs/parkinson_side_inferred.png");
    Ok(())
}
