//! End-to-end command tests on synthetic fixtures: determinism of written
//! artifacts, exit-code taxonomy, and the image (convolutional) pipeline.

use std::path::Path;

use ndarray::Array2;
use sidescore::cli;
use sidescore::data::write_idx;
use sidescore::Error;

fn write(path: &Path, text: &str) {
    std::fs::write(path, text).unwrap();
}

const BLOB_CONFIG: &str = r#"
[data]
source = "blobs"
n_per_class = 40
n_classes = 4
dim = 2
spread = 0.6

[split]
train_fraction = 0.8
seed = 7

[model]
latent_dim = 2
hidden_layers = [16]

[train]
epochs = 8
batch_size = 32
learning_rate = 0.002
seed = 42
triplet_regime = { kind = "by_class" }
triplet_reduction = "mean"

[weights]
alpha = 1.0
beta = 0.2
gamma = 1.0
delta = 1.0
zeta = 1.0
margin = 1.0
lambda_skew = 0.5
"#;

#[test]
fn train_eval_embed_plot_roundtrip_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("blobs.toml");
    write(&cfg_path, BLOB_CONFIG);

    let out1 = dir.path().join("run1");
    let out2 = dir.path().join("run2");
    let o1 = cli::cmd_train(&cfg_path, Some(&out1), None).unwrap();
    let o2 = cli::cmd_train(&cfg_path, Some(&out2), None).unwrap();

    // identical config + seed: byte-identical history, manifest, checkpoint
    let read = |p: &Path| std::fs::read(p).unwrap();
    assert_eq!(read(&o1.history), read(&o2.history));
    assert_eq!(read(&o1.manifest), read(&o2.manifest));
    assert_eq!(read(&o1.checkpoint), read(&o2.checkpoint));

    // history has one row per epoch plus a header
    let history = std::fs::read_to_string(&o1.history).unwrap();
    assert_eq!(history.lines().count(), 1 + 8);
    assert!(history.starts_with("epoch\trecon\tprior_kl\ttriplet\tside\tscore\ttotal"));

    // eval emits each metric key exactly once, in both files
    let (report, metrics_txt) =
        cli::cmd_eval(&o1.checkpoint, &cfg_path, None, Some(&out1)).unwrap();
    assert!(report.n_test > 0);
    let text = std::fs::read_to_string(&metrics_txt).unwrap();
    for key in [
        "score_cluster_accuracy",
        "aligned_pearson_r",
        "aligned_pearson_p",
        "raw_abs_pearson_r",
    ] {
        assert_eq!(text.matches(key).count(), 1, "key {key} in:\n{text}");
    }
    let csv = std::fs::read_to_string(out1.join("metrics.csv")).unwrap();
    assert!(csv.starts_with("metric,value\n"));

    // embed: default columns are exactly id + 2 * latent_dim
    let emb1 = out1.join("embeddings.csv");
    cli::cmd_embed(&o1.checkpoint, &cfg_path, None, &emb1, &[]).unwrap();
    let text = std::fs::read_to_string(&emb1).unwrap();
    let header: Vec<&str> = text.lines().next().unwrap().split(',').collect();
    assert_eq!(header.len(), 1 + 2 * 2);
    assert_eq!(text.lines().count() - 1, report.n_test);

    // re-run writes identical bytes
    let emb2 = out1.join("embeddings2.csv");
    cli::cmd_embed(&o1.checkpoint, &cfg_path, None, &emb2, &[]).unwrap();
    assert_eq!(read(&emb1), read(&emb2));

    // the extras variant carries the requested columns and plots cleanly
    let emb3 = out1.join("embeddings3.csv");
    cli::cmd_embed(
        &o1.checkpoint,
        &cfg_path,
        None,
        &emb3,
        &[
            cli::ExtraColumn::Side,
            cli::ExtraColumn::InferredSide,
            cli::ExtraColumn::Score,
        ],
    )
    .unwrap();
    let png_a = out1.join("side.png");
    let png_b = out1.join("inferred.png");
    cli::cmd_plot_latent(&emb3, "side", &png_a).unwrap();
    cli::cmd_plot_latent(&emb3, "inferred_side", &png_b).unwrap();
    assert!(std::fs::metadata(&png_a).unwrap().len() > 0);
    assert!(std::fs::metadata(&png_b).unwrap().len() > 0);

    // unknown color column is a config error (exit 2)
    let err = cli::cmd_plot_latent(&emb3, "bogus", &out1.join("x.png")).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn missing_data_path_is_exit_3_with_path_named() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("idx.toml");
    write(
        &cfg_path,
        r#"
[data]
source = "idx"
images = "/nonexistent/images-idx3"
labels = "/nonexistent/labels-idx1"
"#,
    );
    let err = cli::cmd_train(&cfg_path, Some(dir.path()), None).unwrap_err();
    assert_eq!(err.exit_code(), 3);
    assert!(
        err.to_string().contains("/nonexistent/images-idx3"),
        "{err}"
    );
}

#[test]
fn malformed_config_is_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("broken.toml");
    write(&cfg_path, "[data\nsource=");
    let err = cli::cmd_train(&cfg_path, Some(dir.path()), None).unwrap_err();
    assert_eq!(err.exit_code(), 2);

    // structurally valid TOML with invalid values is also a config error
    write(
        &cfg_path,
        "[data]\nsource = \"blobs\"\n[weights]\nalpha = -2.0\n",
    );
    let err = cli::cmd_train(&cfg_path, Some(dir.path()), None).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn checksum_validation_guards_data_files() {
    let dir = tempfile::tempdir().unwrap();
    let (img, lab) = quadrant_idx_fixture(dir.path(), 8);
    use sha2::{Digest, Sha256};
    let good = format!("{:x}", Sha256::digest(std::fs::read(&img).unwrap()));
    let cfg_tpl = |sha: &str| {
        format!(
            "[data]\nsource = \"idx\"\nimages = \"{}\"\nlabels = \"{}\"\nsha256_images = \"{sha}\"\n\n[split]\ntrain_fraction = 0.8\nseed = 1\n\n[model]\nlatent_dim = 2\nhidden_layers = [8]\nn_score_classes = 4\n\n[train]\nepochs = 1\nbatch_size = 8\nseed = 1\n\n[weights]\nalpha = 1.0\nbeta = 0.0\ngamma = 0.0\ndelta = 0.0\nzeta = 0.0\n",
            img.display(),
            lab.display()
        )
    };
    let cfg_path = dir.path().join("ok.toml");
    write(&cfg_path, &cfg_tpl(&good));
    cli::cmd_train(&cfg_path, Some(&dir.path().join("out")), None).unwrap();

    let bad_path = dir.path().join("bad.toml");
    write(&bad_path, &cfg_tpl("deadbeef"));
    let err = cli::cmd_train(&bad_path, Some(&dir.path().join("out2")), None).unwrap_err();
    assert_eq!(err.exit_code(), 3);
    assert!(err.to_string().contains("checksum"), "{err}");
}

#[test]
fn csv_override_is_standardized_like_training() {
    let dir = tempfile::tempdir().unwrap();
    // small tabular file with continuous side info and eval targets
    let mut csv = String::from("f1,f2,f3,s,y\n");
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
    for _ in 0..80 {
        let u: f64 = rng.gen_range(-1.0..1.0);
        let f1 = 100.0 + 50.0 * u + rng.gen_range(-5.0..5.0);
        let f2 = -3.0 * u + rng.gen_range(-0.5..0.5);
        let f3 = rng.gen_range(-1.0..1.0);
        let s = u + rng.gen_range(-0.2..0.2);
        let y = u + rng.gen_range(-0.2..0.2);
        csv.push_str(&format!("{f1},{f2},{f3},{s},{y}\n"));
    }
    let data_path = dir.path().join("toy.csv");
    write(&data_path, &csv);
    let schema_path = dir.path().join("schema.toml");
    write(
        &schema_path,
        "side_kind = \"continuous\"\n[columns]\nf1 = \"feature\"\nf2 = \"feature\"\nf3 = \"feature\"\ns = \"side\"\ny = \"eval_label\"\n",
    );
    let cfg_path = dir.path().join("run.toml");
    write(
        &cfg_path,
        &format!(
            "[data]\nsource = \"csv\"\npath = \"{}\"\nschema = \"{}\"\n\n[split]\ntrain_fraction = 0.8\nseed = 2\nstandardize = true\n\n[model]\nlatent_dim = 2\nhidden_layers = [8]\nn_score_classes = 2\n\n[train]\nepochs = 4\nbatch_size = 16\nseed = 5\n\n[weights]\nbeta = 0.1\ngamma = 0.0\n",
            data_path.display(),
            schema_path.display()
        ),
    );
    let out = dir.path().join("run");
    let outputs = cli::cmd_train(&cfg_path, Some(&out), None).unwrap();

    // evaluating an explicit data file routes it through the same
    // training-split standardization, so metrics stay finite and sane
    let (report, _) = cli::cmd_eval(
        &outputs.checkpoint,
        &cfg_path,
        Some((&*data_path, &*schema_path)),
        Some(&out),
    )
    .unwrap();
    assert_eq!(report.n_test, 80);
    assert!(report.aligned_pearson_r.is_finite());
    assert!(report.side_holdout_nll.unwrap().is_finite());
    // embedding the override uses the same space
    let emb = out.join("override_emb.csv");
    cli::cmd_embed(
        &outputs.checkpoint,
        &cfg_path,
        Some((&*data_path, &*schema_path)),
        &emb,
        &[],
    )
    .unwrap();
    assert_eq!(std::fs::read_to_string(&emb).unwrap().lines().count(), 81);
}

#[test]
fn eval_without_labels_is_exit_3() {
    use sidescore::cli::evaluate_model;
    use sidescore::data::{make_blobs, Dataset};
    use sidescore::losses::LossWeights;
    use sidescore::model::{InputKind, ModelSpec, SideKind, TrainedModel};

    let spec = ModelSpec {
        input_kind: InputKind::Tabular,
        input_dim: 2,
        latent_dim: 2,
        hidden_layers: vec![8],
        n_score_classes: 4,
        side_kind: SideKind::None,
    };
    let model = TrainedModel::init(spec, LossWeights::default(), 1).unwrap();
    let with_labels = make_blobs(5, 4, 2, 0.5, 1).unwrap();
    let bare = Dataset::new(with_labels.features().clone(), None, None, "test").unwrap();
    let err = evaluate_model(&model, &bare, &bare).unwrap_err();
    assert_eq!(err.exit_code(), 3);
    assert!(err.to_string().contains("eval labels"), "{err}");
}

#[test]
fn numerical_abort_is_exit_4() {
    let err = Error::Train(sidescore::trainer::TrainError::NonFinite {
        component: "recon".into(),
        epoch: 3,
    });
    assert_eq!(err.exit_code(), 4);
}

#[test]
fn divcheck_passes_and_negative_control_fails() {
    let report = cli::cmd_divcheck(300, 0, false);
    assert!(report.all_pass(), "{}", report.to_text());

    let broken = cli::cmd_divcheck(300, 0, true);
    assert!(!broken.all_pass());
    let failed: Vec<&str> = broken
        .properties
        .iter()
        .filter(|p| !p.pass)
        .map(|p| p.name)
        .collect();
    assert_eq!(failed, vec!["interpolant_endpoints"]);

    // seed-stable worst-case report
    let again = cli::cmd_divcheck(300, 0, false);
    for (a, b) in report.properties.iter().zip(&again.properties) {
        assert_eq!(a.worst.to_bits(), b.worst.to_bits());
    }
}

/// Synthetic 28x28 fixture: class k lights up quadrant k (with a seeded
/// checker texture), so the convolutional pipeline has real signal.
fn quadrant_idx_fixture(dir: &Path, n: usize) -> (std::path::PathBuf, std::path::PathBuf) {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
    let mut pixels = Array2::<u8>::zeros((n, 784));
    let mut labels = vec![0u8; n];
    for i in 0..n {
        let class = (i % 4) as u8;
        labels[i] = class;
        let (y0, x0) = match class {
            0 => (0, 0),
            1 => (0, 14),
            2 => (14, 0),
            _ => (14, 14),
        };
        for dy in 0..14 {
            for dx in 0..14 {
                let v = 160 + rng.gen_range(0..80) as u8;
                pixels[(i, (y0 + dy) * 28 + (x0 + dx))] = v;
            }
        }
    }
    let img = dir.join("quad-images-idx3");
    let lab = dir.join("quad-labels-idx1");
    write_idx(&img, &lab, &pixels, &labels, 28, 28).unwrap();
    (img, lab)
}

#[test]
fn image_pipeline_trains_through_conv_encoder() {
    let dir = tempfile::tempdir().unwrap();
    let (img, lab) = quadrant_idx_fixture(dir.path(), 400);
    let cfg_path = dir.path().join("quad.toml");
    write(
        &cfg_path,
        &format!(
            r#"
[data]
source = "idx"
images = "{}"
labels = "{}"
side_map = "pure"

[split]
train_fraction = 0.8
seed = 3

[model]
latent_dim = 4
hidden_layers = [32, 16]
n_score_classes = 4

[train]
epochs = 6
batch_size = 64
learning_rate = 0.002
seed = 9
triplet_regime = {{ kind = "by_class" }}
triplet_reduction = "mean"

[weights]
alpha = 1.0
beta = 0.2
gamma = 0.5
delta = 2.0
zeta = 1.0
margin = 1.0
lambda_skew = 0.5
"#,
            img.display(),
            lab.display()
        ),
    );
    let out = dir.path().join("run");
    let outputs = cli::cmd_train(&cfg_path, Some(&out), None).unwrap();
    let (report, _) = cli::cmd_eval(&outputs.checkpoint, &cfg_path, None, Some(&out)).unwrap();
    // the quadrant task is easy; a short run should already separate it
    assert!(
        report.side_holdout_accuracy.unwrap() > 0.9,
        "side accuracy {:?}",
        report.side_holdout_accuracy
    );
    assert!(
        report.score_cluster_accuracy > 0.8,
        "score accuracy {}",
        report.score_cluster_accuracy
    );
}
