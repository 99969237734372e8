//! The whole pipeline on the synthetic blob fixture: train with all five
//! loss branches, evaluate the score against held-out labels, and render
//! the latent space.
//!
//! ```text
//! cargo run --release --example blobs_pipeline
//! ```

use sidescore::cli::{evaluate_model, model_spec_for, prepare_data};
use sidescore::config::RunConfig;
use sidescore::data::SideInfo;
use sidescore::eval::pca_project;
use sidescore::plot::{scatter, ColorSpec};
use sidescore::trainer::train;

fn main() -> sidescore::Result<()> {
    let cfg =
        RunConfig::from_toml_file(std::path::Path::new("crates/sidescore/configs/blobs.toml"))?;
    let prepared = prepare_data(&cfg)?;
    let spec = model_spec_for(&cfg, &prepared);
    println!(
        "training on {} rows ({} features), latent dim {}",
        prepared.train.n(),
        prepared.train.n_features(),
        spec.latent_dim
    );

    let (model, history) = train(&spec, &prepared.train, &cfg.train_config())?;
    for (i, e) in history.epochs.iter().enumerate().step_by(8) {
        println!(
            "epoch {i:>3}: recon {:.4}  prior {:.4}  triplet {:.4}  side {:.4}  score {:+.4}  total {:.4}",
            e.losses.recon, e.losses.prior_kl, e.losses.triplet, e.losses.side, e.losses.score, e.losses.total
        );
    }

    let report = evaluate_model(&model, &prepared.train, &prepared.test)?;
    print!("\nheld-out metrics:\n{}", report.to_text());

    // project the held-out latent means and color by true class
    let mu = model.embed_batch(prepared.test.features())?;
    let proj = pca_project(&mu, 2).map_err(sidescore::Error::Eval)?;
    let classes = match prepared.test.side() {
        Some(SideInfo::Categorical { classes, .. }) => classes.clone(),
        _ => vec![0; prepared.test.n()],
    };
    let out = std::path::Path::new("runs/blobs_latent.png");
    std::fs::create_dir_all("runs")?;
    scatter(&proj.points, &ColorSpec::Categorical(classes), out)?;
    println!("\nlatent scatter written to {}", out.display());
    Ok(())
}
