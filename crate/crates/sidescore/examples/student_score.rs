//! Academic scoring: the Portuguese final grade is side information for a
//! Mathematics score. Merges the two course files on the shared identity
//! attributes (writing `student_merged.csv` next to them), trains, and
//! validates against the held-out Mathematics grade.
//!
//! Needs `student-mat.csv` and `student-por.csv` (see README 'Fetching
//! the datasets').
//!
//! ```text
//! cargo run --release --example student_score
//! ```

use std::path::{Path, PathBuf};

use sidescore::cli::{evaluate_model, model_spec_for, prepare_data};
use sidescore::config::{DataConfig, RunConfig};
use sidescore::data::merge_student_csv;
use sidescore::trainer::train;

fn main() -> sidescore::Result<()> {
    let dir = std::env::var("SIDESCORE_DATA")
        .map(PathBuf::from)
        .unwrap_or_else(|_| PathBuf::from("data"));
    let mat = dir.join("student-mat.csv");
    let por = dir.join("student-por.csv");
    if !mat.is_file() || !por.is_file() {
        eprintln!(
            "student files not found at {} / {}; fetch them first (see README)",
            mat.display(),
            por.display()
        );
        return Ok(());
    }

    let merged = dir.join("student_merged.csv");
    let n = merge_student_csv(&mat, &por, &merged)?;
    println!(
        "merged {n} students present in both course files -> {}",
        merged.display()
    );

    let mut cfg = RunConfig::from_toml_file(Path::new("crates/sidescore/configs/student.toml"))?;
    if let DataConfig::Csv { path, .. } = &mut cfg.data {
        *path = merged;
    }
    let prepared = prepare_data(&cfg)?;
    let spec = model_spec_for(&cfg, &prepared);
    let (model, _) = train(&spec, &prepared.train, &cfg.train_config())?;
    let report = evaluate_model(&model, &prepared.train, &prepared.test)?;
    print!(
        "\nheld-out metrics (targets are the unseen Mathematics grades):\n{}",
        report.to_text()
    );
    Ok(())
}
