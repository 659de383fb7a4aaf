//! Gaussian Markov random field priors, penalised-complexity hyperpriors and a
//! posterior sampler for latent Gaussian models with Gaussian or
//! negative-binomial observations.

pub mod graph;
pub mod linalg;
pub mod model;
pub mod nb;
pub mod prior;
pub mod sampler;
pub mod samples;
pub mod structure;

pub use graph::{GraphReport, RegionGraph};
pub use model::{
    Design, EffectBlock, FixedEffect, HyperValues, LatentModelSpec, Likelihood, Observations,
};
pub use nb::{nb_loglik, nb_variance};
pub use prior::{LogNormalPrior, NormalPrior, PcPriorPhi, PcPriorSigma};
pub use sampler::{laplace_mode, sample_posterior, SamplerSettings};
pub use samples::{Diagnostics, PosteriorSamples};
pub use structure::{build_interaction, build_structure, StructureKind, StructureMatrix};

#[derive(Debug, thiserror::Error)]
pub enum GmrfError {
    #[error("{kind:?} structure needs dimension >= {min}, got {dim}")]
    DimensionTooSmall {
        kind: StructureKind,
        dim: usize,
        min: usize,
    },
    #[error("interaction dimension {0} exceeds the dense limit")]
    DimensionOverflow(usize),
    #[error("interaction factors must be structured, got {0:?}")]
    UnstructuredInteraction(StructureKind),
    #[error("invalid prior: {0}")]
    InvalidPrior(String),
    #[error("structure must be scaled")]
    Unscaled,
    #[error("matrix is not positive definite")]
    NotPositiveDefinite,
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("non-finite posterior density at the initial state")]
    NonFinite,
    #[error("chain {chain} diverged: acceptance {rate:.4} over {window} iterations")]
    Divergent {
        chain: usize,
        rate: f64,
        window: usize,
    },
    #[error("invalid graph: {0}")]
    InvalidGraph(String),
}
