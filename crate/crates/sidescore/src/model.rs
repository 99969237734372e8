//! The three-branch architecture: a shared stochastic encoder feeding a
//! decoder, a side-information head, and a score head.
//!
//! Side and score heads consume only the latent code `z`, never raw side
//! information — the factorization S -> X -> Z is enforced by the
//! interfaces themselves. Training runs on sampled latents; inference uses
//! the posterior mean.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::divergence::{GaussianDiag, VAR_FLOOR};
use crate::losses::{Likelihood, LossWeights, ScoreDistribution, SidePrediction};
use crate::nn::{ConvConf, ConvLayer, Graph, Linear, ParamStore, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("input shape mismatch: expected {expected} features, got {found}")]
    ShapeMismatch { expected: usize, found: usize },
    #[error("non-finite input")]
    NonFiniteInput,
    #[error("model has no side head (side_kind = none)")]
    SideHeadAbsent,
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Loss(#[from] crate::losses::LossError),
    #[error(transparent)]
    Divergence(#[from] crate::divergence::DivergenceError),
}

type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputKind {
    Tabular,
    Image28x28,
}

/// Side-information head shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SideKind {
    Categorical { n_classes: usize },
    Continuous,
    None,
}

/// Architecture hyperparameters. `hidden_layers` sizes the fully connected
/// stack of the encoder (after the convolution front-end for images) and,
/// reversed, of the decoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_kind: InputKind,
    pub input_dim: usize,
    pub latent_dim: usize,
    pub hidden_layers: Vec<usize>,
    pub n_score_classes: usize,
    pub side_kind: SideKind,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim < 2 {
            return Err(ModelError::InvalidSpec(format!(
                "latent_dim must be >= 2, got {}",
                self.latent_dim
            )));
        }
        if self.n_score_classes < 2 {
            return Err(ModelError::InvalidSpec(format!(
                "n_score_classes must be >= 2, got {}",
                self.n_score_classes
            )));
        }
        if self.input_dim == 0 {
            return Err(ModelError::InvalidSpec("input_dim must be positive".into()));
        }
        if self.input_kind == InputKind::Image28x28 && self.input_dim != 784 {
            return Err(ModelError::InvalidSpec(format!(
                "image_28x28 input requires input_dim = 784, got {}",
                self.input_dim
            )));
        }
        if let SideKind::Categorical { n_classes } = self.side_kind {
            if n_classes < 2 {
                return Err(ModelError::InvalidSpec("side classes must be >= 2".into()));
            }
        }
        if self.hidden_layers.contains(&0) {
            return Err(ModelError::InvalidSpec(
                "hidden layer sizes must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Decoder observation model: Bernoulli for images in [0,1],
    /// unit-variance Gaussian for standardized tabular data.
    pub fn likelihood(&self) -> Likelihood {
        match self.input_kind {
            InputKind::Image28x28 => Likelihood::Bernoulli,
            InputKind::Tabular => Likelihood::GaussianUnitVar,
        }
    }
}

/// Seeds that produced this model, recorded for the run manifest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedManifest {
    pub init_seed: u64,
    pub train_seed: Option<u64>,
}

const HEAD_HIDDEN: usize = 64;

#[derive(Debug, Clone)]
enum SideHead {
    Categorical {
        hidden: Linear,
        out: Linear,
    },
    Continuous {
        hidden: Linear,
        mean: Linear,
        var: Linear,
    },
    None,
}

#[derive(Debug, Clone)]
struct Architecture {
    conv: Option<(ConvLayer, ConvLayer)>,
    enc_fc: Vec<Linear>,
    mu_head: Linear,
    var_head: Linear,
    dec_fc: Vec<Linear>,
    dec_out: Linear,
    side: SideHead,
    score_hidden: Linear,
    score_out: Linear,
}

/// Bias value giving softplus(b) = 1, so variance heads start near 1.
fn softplus_inverse_one() -> f64 {
    (std::f64::consts::E - 1.0f64).ln()
}

fn build_architecture(
    spec: &ModelSpec,
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
) -> Architecture {
    let relu_gain = 2.0f64.sqrt();
    let (conv, enc_in) = match spec.input_kind {
        InputKind::Tabular => (None, spec.input_dim),
        InputKind::Image28x28 => {
            let c1 = ConvConf {
                in_ch: 1,
                out_ch: 8,
                kernel: 3,
                stride: 2,
                pad: 1,
                h_in: 28,
                w_in: 28,
            };
            let c2 = ConvConf {
                in_ch: 8,
                out_ch: 16,
                kernel: 3,
                stride: 2,
                pad: 1,
                h_in: 14,
                w_in: 14,
            };
            let flat = c2.out_ch * c2.h_out() * c2.w_out();
            let conv1 = ConvLayer::new(store, rng, "enc.conv1", c1);
            let conv2 = ConvLayer::new(store, rng, "enc.conv2", c2);
            (Some((conv1, conv2)), flat)
        }
    };
    let mut enc_fc = Vec::new();
    let mut prev = enc_in;
    for (i, &h) in spec.hidden_layers.iter().enumerate() {
        enc_fc.push(Linear::new(
            store,
            rng,
            &format!("enc.fc{i}"),
            prev,
            h,
            relu_gain,
        ));
        prev = h;
    }
    let mu_head = Linear::new(store, rng, "enc.mu", prev, spec.latent_dim, 1.0);
    let var_head = Linear::new(store, rng, "enc.var", prev, spec.latent_dim, 1.0);
    store.value_mut(var_head.b).fill(softplus_inverse_one());

    let mut dec_fc = Vec::new();
    let mut prev = spec.latent_dim;
    for (i, &h) in spec.hidden_layers.iter().rev().enumerate() {
        dec_fc.push(Linear::new(
            store,
            rng,
            &format!("dec.fc{i}"),
            prev,
            h,
            relu_gain,
        ));
        prev = h;
    }
    let dec_out = Linear::new(store, rng, "dec.out", prev, spec.input_dim, 1.0);

    let side = match spec.side_kind {
        SideKind::Categorical { n_classes } => SideHead::Categorical {
            hidden: Linear::new(
                store,
                rng,
                "side.fc0",
                spec.latent_dim,
                HEAD_HIDDEN,
                relu_gain,
            ),
            out: Linear::new(store, rng, "side.out", HEAD_HIDDEN, n_classes, 1.0),
        },
        SideKind::Continuous => {
            let hidden = Linear::new(
                store,
                rng,
                "side.fc0",
                spec.latent_dim,
                HEAD_HIDDEN,
                relu_gain,
            );
            let mean = Linear::new(store, rng, "side.mean", HEAD_HIDDEN, 1, 1.0);
            let var = Linear::new(store, rng, "side.var", HEAD_HIDDEN, 1, 1.0);
            store.value_mut(var.b).fill(softplus_inverse_one());
            SideHead::Continuous { hidden, mean, var }
        }
        SideKind::None => SideHead::None,
    };
    let score_hidden = Linear::new(
        store,
        rng,
        "score.fc0",
        spec.latent_dim,
        HEAD_HIDDEN,
        relu_gain,
    );
    let score_out = Linear::new(
        store,
        rng,
        "score.out",
        HEAD_HIDDEN,
        spec.n_score_classes,
        1.0,
    );

    Architecture {
        conv,
        enc_fc,
        mu_head,
        var_head,
        dec_fc,
        dec_out,
        side,
        score_hidden,
        score_out,
    }
}

/// Side-head output inside a graph.
pub enum SideGraphOut {
    /// logits over side classes, n x K_s
    Categorical(Var),
    /// per-row mean and positive variance, each n x 1
    Continuous { mean: Var, var: Var },
}

/// Encoder, decoder, and heads with their parameter state.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    spec: ModelSpec,
    weights: LossWeights,
    pub(crate) store: ParamStore,
    arch: Architecture,
    seeds: SeedManifest,
}

impl TrainedModel {
    /// Freshly initialized model. `init_seed` drives the weight
    /// initialization stream (He-scaled normals, zero biases, variance
    /// head biased to start near unit variance).
    pub fn init(spec: ModelSpec, weights: LossWeights, init_seed: u64) -> Result<Self> {
        spec.validate()?;
        weights.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
        let arch = build_architecture(&spec, &mut store, &mut rng);
        Ok(Self {
            spec,
            weights,
            store,
            arch,
            seeds: SeedManifest {
                init_seed,
                train_seed: None,
            },
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn weights(&self) -> &LossWeights {
        &self.weights
    }

    pub fn seeds(&self) -> SeedManifest {
        self.seeds
    }

    pub(crate) fn set_train_seed(&mut self, seed: u64) {
        self.seeds.train_seed = Some(seed);
    }

    pub fn n_parameters(&self) -> usize {
        self.store.iter().map(|(_, a)| a.len()).sum()
    }

    /// Named parameter arrays, in registration order.
    pub fn parameters(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.store.iter()
    }

    fn check_batch(&self, x: &Array2<f64>) -> Result<()> {
        if x.ncols() != self.spec.input_dim {
            return Err(ModelError::ShapeMismatch {
                expected: self.spec.input_dim,
                found: x.ncols(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFiniteInput);
        }
        Ok(())
    }

    /// Encoder forward pass inside a graph: returns per-row posterior
    /// mean and variance (softplus-mapped, floored).
    pub fn encode_graph(&self, g: &mut Graph, x: Var) -> (Var, Var) {
        let mut h = x;
        if let Some((c1, c2)) = &self.arch.conv {
            h = c1.forward(g, h);
            h = g.tape.relu(h);
            h = c2.forward(g, h);
            h = g.tape.relu(h);
        }
        for fc in &self.arch.enc_fc {
            h = fc.forward(g, h);
            h = g.tape.relu(h);
        }
        let mu = self.arch.mu_head.forward(g, h);
        let raw = self.arch.var_head.forward(g, h);
        let sp = g.tape.softplus(raw);
        let var = g.tape.add_scalar(sp, VAR_FLOOR);
        (mu, var)
    }

    /// Decoder forward pass: Bernoulli logits (images) or Gaussian mean
    /// (tabular), n x input_dim.
    pub fn decode_graph(&self, g: &mut Graph, z: Var) -> Var {
        let mut h = z;
        for fc in &self.arch.dec_fc {
            h = fc.forward(g, h);
            h = g.tape.relu(h);
        }
        self.arch.dec_out.forward(g, h)
    }

    /// Side head forward pass; errors when the model was built without one.
    pub fn side_graph(&self, g: &mut Graph, z: Var) -> Result<SideGraphOut> {
        match &self.arch.side {
            SideHead::Categorical { hidden, out } => {
                let mut h = hidden.forward(g, z);
                h = g.tape.relu(h);
                Ok(SideGraphOut::Categorical(out.forward(g, h)))
            }
            SideHead::Continuous { hidden, mean, var } => {
                let mut h = hidden.forward(g, z);
                h = g.tape.relu(h);
                let m = mean.forward(g, h);
                let raw = var.forward(g, h);
                let sp = g.tape.softplus(raw);
                let v = g.tape.add_scalar(sp, VAR_FLOOR);
                Ok(SideGraphOut::Continuous { mean: m, var: v })
            }
            SideHead::None => Err(ModelError::SideHeadAbsent),
        }
    }

    /// Score head forward pass: logits over the score classes.
    pub fn score_logits_graph(&self, g: &mut Graph, z: Var) -> Var {
        let mut h = self.arch.score_hidden.forward(g, z);
        h = g.tape.relu(h);
        self.arch.score_out.forward(g, h)
    }

    /// Posterior parameters for a batch of rows (deterministic).
    pub fn encode_batch(&self, x: &Array2<f64>) -> Result<Vec<GaussianDiag>> {
        let (mu, var) = self.encode_arrays(x)?;
        Ok((0..x.nrows())
            .map(|i| {
                GaussianDiag::new(mu.row(i).to_vec(), var.row(i).to_vec())
                    .expect("softplus keeps variances positive")
            })
            .collect())
    }

    /// Posterior mean and variance matrices for a batch.
    pub fn encode_arrays(&self, x: &Array2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        self.check_batch(x)?;
        let mut g = Graph::frozen(&self.store);
        let xv = g.tape.constant(x.clone());
        let (mu, var) = self.encode_graph(&mut g, xv);
        Ok((g.tape.value(mu).clone(), g.tape.value(var).clone()))
    }

    /// Posterior for a single instance.
    pub fn encode(&self, x: &[f64]) -> Result<GaussianDiag> {
        let row = Array2::from_shape_vec((1, x.len()), x.to_vec()).map_err(|_| {
            ModelError::ShapeMismatch {
                expected: self.spec.input_dim,
                found: x.len(),
            }
        })?;
        Ok(self.encode_batch(&row)?.remove(0))
    }

    /// Deterministic embedding: the posterior mean.
    pub fn embed(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.encode(x)?.mean().to_vec())
    }

    /// Row-ordered posterior means for a batch.
    pub fn embed_batch(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        Ok(self.encode_arrays(x)?.0)
    }

    /// Decode a batch of latent rows into reconstruction parameters:
    /// Bernoulli probabilities for images, Gaussian means for tabular.
    pub fn decode_batch(&self, z: &Array2<f64>) -> Result<Array2<f64>> {
        if z.ncols() != self.spec.latent_dim {
            return Err(ModelError::ShapeMismatch {
                expected: self.spec.latent_dim,
                found: z.ncols(),
            });
        }
        let mut g = Graph::frozen(&self.store);
        let zv = g.tape.constant(z.clone());
        let out = self.decode_graph(&mut g, zv);
        let raw = g.tape.value(out).clone();
        Ok(match self.spec.likelihood() {
            Likelihood::Bernoulli => raw.mapv(|l| 1.0 / (1.0 + (-l).exp())),
            Likelihood::GaussianUnitVar => raw,
        })
    }

    /// Decode one latent vector.
    pub fn decode(&self, z: &[f64]) -> Result<Vec<f64>> {
        let row = Array2::from_shape_vec((1, z.len()), z.to_vec()).map_err(|_| {
            ModelError::ShapeMismatch {
                expected: self.spec.latent_dim,
                found: z.len(),
            }
        })?;
        Ok(self.decode_batch(&row)?.row(0).to_vec())
    }

    /// Side prediction from one latent vector.
    pub fn predict_side(&self, z: &[f64]) -> Result<SidePrediction> {
        let mut preds = self.predict_side_batch(&to_row(z, self.spec.latent_dim)?)?;
        Ok(preds.remove(0))
    }

    /// Side predictions for a batch of latent rows.
    pub fn predict_side_batch(&self, z: &Array2<f64>) -> Result<Vec<SidePrediction>> {
        if z.ncols() != self.spec.latent_dim {
            return Err(ModelError::ShapeMismatch {
                expected: self.spec.latent_dim,
                found: z.ncols(),
            });
        }
        let mut g = Graph::frozen(&self.store);
        let zv = g.tape.constant(z.clone());
        match self.side_graph(&mut g, zv)? {
            SideGraphOut::Categorical(logits) => {
                let ls = g.tape.log_softmax(logits);
                let probs = g.tape.value(ls).mapv(f64::exp);
                Ok(probs
                    .rows()
                    .into_iter()
                    .map(|r| SidePrediction::Categorical(r.to_vec()))
                    .collect())
            }
            SideGraphOut::Continuous { mean, var } => {
                let m = g.tape.value(mean);
                let v = g.tape.value(var);
                Ok((0..z.nrows())
                    .map(|i| SidePrediction::Continuous {
                        mean: m[(i, 0)],
                        var: v[(i, 0)],
                    })
                    .collect())
            }
        }
    }

    /// Score distribution from one latent vector.
    pub fn predict_score(&self, z: &[f64]) -> Result<ScoreDistribution> {
        let mut v = self.predict_score_batch(&to_row(z, self.spec.latent_dim)?)?;
        Ok(v.remove(0))
    }

    /// Score distributions for a batch of latent rows.
    pub fn predict_score_batch(&self, z: &Array2<f64>) -> Result<Vec<ScoreDistribution>> {
        if z.ncols() != self.spec.latent_dim {
            return Err(ModelError::ShapeMismatch {
                expected: self.spec.latent_dim,
                found: z.ncols(),
            });
        }
        let mut g = Graph::frozen(&self.store);
        let zv = g.tape.constant(z.clone());
        let logits = self.score_logits_graph(&mut g, zv);
        let ls = g.tape.log_softmax(logits);
        let probs = g.tape.value(ls).mapv(f64::exp);
        probs
            .rows()
            .into_iter()
            .map(|r| {
                // renormalize away the final-ulp drift so the simplex
                // invariant holds exactly enough for ScoreDistribution
                let v = r.to_vec();
                let s: f64 = v.iter().sum();
                ScoreDistribution::new(v.into_iter().map(|p| p / s).collect()).map_err(Into::into)
            })
            .collect()
    }

    /// End-to-end convenience: hard score classes for a feature batch,
    /// scored at the posterior mean.
    pub fn score_classes(&self, x: &Array2<f64>) -> Result<Vec<usize>> {
        let mu = self.embed_batch(x)?;
        Ok(self
            .predict_score_batch(&mu)?
            .iter()
            .map(|d| d.hard_class())
            .collect())
    }

    // ---- checkpointing ----

    const MAGIC: &'static [u8; 8] = b"SSCKPT01";

    /// Serialize spec, weights, seed manifest, and raw parameter bits into
    /// a single archive. Loading reproduces outputs bit-exactly.
    pub fn save(&self, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct Header<'a> {
            spec: &'a ModelSpec,
            weights: &'a LossWeights,
            seeds: &'a SeedManifest,
            params: Vec<(String, usize, usize)>,
        }
        let header = Header {
            spec: &self.spec,
            weights: &self.weights,
            seeds: &self.seeds,
            params: self
                .store
                .iter()
                .map(|(n, a)| (n.to_string(), a.nrows(), a.ncols()))
                .collect(),
        };
        let json =
            serde_json::to_vec(&header).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        let mut buf = Vec::new();
        buf.extend_from_slice(Self::MAGIC);
        buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
        buf.extend_from_slice(&json);
        for (_, a) in self.store.iter() {
            for v in a.iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(&buf))
            .map_err(|source| ModelError::Io {
                path: path.display().to_string(),
                source,
            })
    }

    pub fn load(path: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Header {
            spec: ModelSpec,
            weights: LossWeights,
            seeds: SeedManifest,
            params: Vec<(String, usize, usize)>,
        }
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|source| ModelError::Io {
                path: path.display().to_string(),
                source,
            })?;
        if bytes.len() < 16 || &bytes[0..8] != Self::MAGIC {
            return Err(ModelError::Checkpoint(format!(
                "{} is not a checkpoint",
                path.display()
            )));
        }
        let json_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let header: Header = serde_json::from_slice(
            bytes
                .get(16..16 + json_len)
                .ok_or_else(|| ModelError::Checkpoint("truncated header".into()))?,
        )
        .map_err(|e| ModelError::Checkpoint(e.to_string()))?;

        let mut model = Self::init(header.spec, header.weights, header.seeds.init_seed)?;
        model.seeds = header.seeds;
        let mut off = 16 + json_len;
        let mut values = Vec::with_capacity(header.params.len());
        for (name, rows, cols) in &header.params {
            let need = rows * cols * 8;
            let chunk = bytes.get(off..off + need).ok_or_else(|| {
                ModelError::Checkpoint(format!("truncated payload at parameter {name}"))
            })?;
            let data: Vec<f64> = chunk
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect();
            values.push(
                Array2::from_shape_vec((*rows, *cols), data)
                    .map_err(|e| ModelError::Checkpoint(e.to_string()))?,
            );
            off += need;
        }
        model
            .store
            .load_values(values)
            .map_err(ModelError::Checkpoint)?;
        Ok(model)
    }
}

/// Location-scale reparameterization: `z = mean + sqrt(var) * noise`.
/// Differentiable in mean and variance for fixed noise; the graph-side
/// equivalent lives in the trainer.
pub fn sample_latent(post: &GaussianDiag, noise: &[f64]) -> Result<Vec<f64>> {
    if noise.len() != post.dim() {
        return Err(ModelError::ShapeMismatch {
            expected: post.dim(),
            found: noise.len(),
        });
    }
    Ok(post
        .mean()
        .iter()
        .zip(post.var())
        .zip(noise)
        .map(|((m, v), e)| m + v.sqrt() * e)
        .collect())
}

fn to_row(z: &[f64], expected: usize) -> Result<Array2<f64>> {
    Array2::from_shape_vec((1, z.len()), z.to_vec()).map_err(|_| ModelError::ShapeMismatch {
        expected,
        found: z.len(),
    })
}
