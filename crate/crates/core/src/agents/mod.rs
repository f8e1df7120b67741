//! Benchmark agents.
//!
//! Every agent is trained from an [`AgentSpec`] and a [`Dataset`] and yields a
//! [`PosteriorSampler`]: an immutable object that, given test inputs, produces
//! the class probabilities of `M` models drawn from the agent's belief.
//! Model `m` of a call depends only on `(sampler, seed, m)`.

mod deep_kernel;
mod dropout;
mod ensemble;
mod fixtures;
mod knn;
mod langevin;
mod spec;

use nalgebra::DMatrix;

pub use self::deep_kernel::{
    gp_covariance_direct, gp_covariance_woodbury, DeepKernelSampler, DEFAULT_GP_NOISE,
};
pub use self::dropout::DropoutSampler;
pub use self::ensemble::EnsembleSampler;
pub use self::fixtures::ConstantMixtureSampler;
pub use self::knn::{KnnSampler, KnnWeighting, KNN_PROB_CEILING, KNN_PROB_FLOOR};
pub use self::langevin::{langevin_chain, LangevinConfig};
pub use self::spec::{AgentKind, AgentSpec, Bootstrap, DecayForm, DropoutDecay, HyperValue, ResolvedAgent};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::likelihood::ProbMatrix;
use crate::seeding::derive_seed;

/// What an agent may know about the problem besides its training data.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnvMeta {
    pub input_dim: usize,
    pub num_classes: usize,
    pub temperature: f64,
    pub train_size: usize,
}

/// A trained agent's belief over models.
pub trait PosteriorSampler: Send + Sync {
    fn input_dim(&self) -> usize;

    fn num_classes(&self) -> usize;

    /// Class probabilities (`tau × K`) of model `index` on `inputs`.
    fn model_probs(&self, inputs: &DMatrix<f64>, seed: u64, index: usize) -> Result<DMatrix<f64>>;

    /// `num_models` models drawn i.i.d. from the belief. Implementations may
    /// override this to share work across models.
    fn sample_probs(&self, inputs: &DMatrix<f64>, num_models: usize, seed: u64) -> Result<ProbMatrix> {
        let tables = (0..num_models)
            .map(|m| self.model_probs(inputs, seed, m))
            .collect::<Result<Vec<_>>>()?;
        ProbMatrix::from_tables(&tables)
    }
}

/// Seed of model `index` within one sampling call.
pub(crate) fn model_seed(seed: u64, index: usize) -> u64 {
    derive_seed(seed, &[index as u64])
}

/// Draw `num_models` models from `sampler` on `inputs`, checking shapes.
pub fn sample_probs(
    sampler: &dyn PosteriorSampler,
    inputs: &DMatrix<f64>,
    num_models: usize,
    seed: u64,
) -> Result<ProbMatrix> {
    if num_models == 0 {
        return Err(Error::usage("at least one model must be sampled"));
    }
    if inputs.ncols() != sampler.input_dim() {
        return Err(Error::shape(format!(
            "inputs have {} columns but the agent expects {}",
            inputs.ncols(),
            sampler.input_dim()
        )));
    }
    if inputs.nrows() == 0 {
        return Err(Error::shape("at least one input row is required"));
    }
    sampler.sample_probs(inputs, num_models, seed)
}

/// Train the agent described by `spec` on `dataset`; deterministic in `spec.seed`.
pub fn train_agent(spec: &AgentSpec, dataset: &Dataset, meta: &EnvMeta) -> Result<Box<dyn PosteriorSampler>> {
    train_agent_with_seed(spec, dataset, meta, spec.seed)
}

pub fn train_agent_with_seed(
    spec: &AgentSpec,
    dataset: &Dataset,
    meta: &EnvMeta,
    seed: u64,
) -> Result<Box<dyn PosteriorSampler>> {
    if dataset.is_empty() {
        return Err(Error::usage("cannot train an agent on an empty dataset"));
    }
    if dataset.input_dim() != meta.input_dim {
        return Err(Error::shape(format!(
            "dataset has {} features but the problem declares {}",
            dataset.input_dim(),
            meta.input_dim
        )));
    }
    dataset.check_labels(meta.num_classes)?;
    let meta = EnvMeta {
        train_size: dataset.len(),
        ..*meta
    };
    let sampler: Box<dyn PosteriorSampler> = match spec.resolve()? {
        ResolvedAgent::Ensemble(cfg) => Box::new(ensemble::train(&cfg, dataset, &meta, seed)?),
        ResolvedAgent::Dropout(cfg) => Box::new(dropout::train(&cfg, dataset, &meta, seed)?),
        ResolvedAgent::Sgld(cfg) => Box::new(langevin::train(&cfg, dataset, &meta, seed)?),
        ResolvedAgent::DeepKernel(cfg) => Box::new(deep_kernel::train(&cfg, dataset, &meta, seed)?),
        ResolvedAgent::Knn(cfg) => Box::new(knn::train(&cfg, dataset, &meta)?),
    };
    Ok(sampler)
}
