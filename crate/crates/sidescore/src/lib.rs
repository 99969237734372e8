//! Score learning from unlabeled data plus side information.
//!
//! The model combines four ingredients over a shared stochastic encoder:
//!
//! - a variational autoencoder (reconstruction + KL-to-prior regularization),
//! - an information-bottleneck head predicting per-instance side information
//!   from the latent code,
//! - a score head trained by maximizing the mutual information between the
//!   latent code and the inferred score, and
//! - a triplet loss over the latent posteriors, measured with the square root
//!   of the skew-geometric Jensen-Shannon divergence, which has a closed form
//!   for Gaussians.
//!
//! The crate is organized around that decomposition:
//!
//! | module | contents |
//! |--------|----------|
//! | [`divergence`] | diagonal-Gaussian divergences, closed forms and oracles |
//! | [`losses`] | the five loss terms and their weighted combination |
//! | [`nn`] | a small reverse-mode autodiff tape and layer primitives |
//! | [`model`] | encoder, decoder, side head, score head, checkpoints |
//! | [`triplets`] | (anchor, positive, negative) mining strategies |
//! | [`trainer`] | the optimization loop and its semi-supervised variant |
//! | [`data`] | IDX/CSV ingestion, side-information maps, synthetic fixtures |
//! | [`eval`] | cluster accuracy, correlation, score alignment, PCA |
//! | [`cli`] | the `train`/`eval`/`embed`/`plot-latent`/`divcheck` commands |
//!
//! Every operation that consumes randomness takes an explicit seed and is
//! reproducible run-to-run on the same platform. See the `examples/`
//! directory for end-to-end walkthroughs of each capability.

pub mod cli;
pub mod config;
pub mod data;
pub mod divergence;
pub mod eval;
pub mod losses;
pub mod model;
pub mod nn;
pub mod plot;
pub mod trainer;
pub mod triplets;

pub use divergence::{GaussianDiag, SkewParam};
pub use losses::{LossBreakdown, LossWeights, ScoreDistribution};
pub use model::{ModelSpec, TrainedModel};
pub use trainer::{TrainConfig, TrainHistory};

use thiserror::Error;

/// Crate-wide error type; each module contributes a variant.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Divergence(#[from] divergence::DivergenceError),
    #[error(transparent)]
    Loss(#[from] losses::LossError),
    #[error(transparent)]
    Model(#[from] model::ModelError),
    #[error(transparent)]
    Triplet(#[from] triplets::TripletError),
    #[error(transparent)]
    Train(#[from] trainer::TrainError),
    #[error(transparent)]
    Data(#[from] data::DataError),
    #[error(transparent)]
    Eval(#[from] eval::EvalError),
    #[error(transparent)]
    Config(#[from] config::ConfigError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Msg(String),
}

impl Error {
    /// Stable exit-code taxonomy for the command-line surface:
    /// 2 = configuration error, 3 = data error, 4 = numerical abort,
    /// 1 = anything else (including property-check failures).
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) | Error::Io(_) => 3,
            Error::Train(trainer::TrainError::NonFinite { .. }) => 4,
            Error::Train(trainer::TrainError::Config(_)) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
