use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Bernoulli, Distribution, Exp1};

use super::spec::{Bootstrap, EnsembleConfig, NetworkConfig};
use super::{model_seed, EnvMeta, PosteriorSampler};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::generative::{sample_mlp, GenerativeConfig};
use crate::likelihood::ProbMatrix;
use crate::nncore::{self, default_batch_size, MlpParams, TrainConfig, TrainOptions, XavierInit};
use crate::seeding::{derive_rng, derive_seed, stream};

/// A fixed additive prior: `scale * net(x)` is added to the member's logits.
#[derive(Debug, Clone)]
struct PriorFunction {
    net: MlpParams,
    scale: f64,
}

impl PriorFunction {
    fn logits(&self, inputs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(self.net.forward(inputs)? * self.scale)
    }
}

/// Uniform mixture over a finite set of networks. Backs `mlp`, `ensemble`,
/// `ensemble_plus` and the snapshots of `sgld`.
#[derive(Debug, Clone)]
pub struct EnsembleSampler {
    members: Vec<MlpParams>,
    priors: Vec<Option<PriorFunction>>,
}

impl EnsembleSampler {
    pub fn from_members(members: Vec<MlpParams>) -> Result<Self> {
        let Some(first) = members.first() else {
            return Err(Error::usage("an ensemble needs at least one member"));
        };
        let (d, k) = (first.input_dim(), first.output_dim());
        if members.iter().any(|m| m.input_dim() != d || m.output_dim() != k) {
            return Err(Error::shape("ensemble members disagree on input or output width"));
        }
        let priors = vec![None; members.len()];
        Ok(EnsembleSampler { members, priors })
    }

    pub fn num_members(&self) -> usize {
        self.members.len()
    }

    pub fn members(&self) -> &[MlpParams] {
        &self.members
    }

    /// Member used for model `index` of a sampling call.
    pub fn member_index(&self, seed: u64, index: usize) -> usize {
        if self.members.len() == 1 {
            return 0;
        }
        derive_rng(model_seed(seed, index), &[stream::MODELS]).random_range(0..self.members.len())
    }

    fn member_probs(&self, member: usize, inputs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let mut logits = self.members[member].forward(inputs)?;
        if let Some(prior) = &self.priors[member] {
            logits += prior.logits(inputs)?;
        }
        nncore::softmax_rows(&logits, 1.0)
    }
}

impl PosteriorSampler for EnsembleSampler {
    fn input_dim(&self) -> usize {
        self.members[0].input_dim()
    }

    fn num_classes(&self) -> usize {
        self.members[0].output_dim()
    }

    fn model_probs(&self, inputs: &DMatrix<f64>, seed: u64, index: usize) -> Result<DMatrix<f64>> {
        self.member_probs(self.member_index(seed, index), inputs)
    }

    fn sample_probs(&self, inputs: &DMatrix<f64>, num_models: usize, seed: u64) -> Result<ProbMatrix> {
        let mut cache: BTreeMap<usize, DMatrix<f64>> = BTreeMap::new();
        let mut tables = Vec::with_capacity(num_models);
        for m in 0..num_models {
            let member = self.member_index(seed, m);
            if !cache.contains_key(&member) {
                cache.insert(member, self.member_probs(member, inputs)?);
            }
            tables.push(cache[&member].clone());
        }
        ProbMatrix::from_tables(&tables)
    }
}

/// Everything needed to fit one network of an agent.
pub(super) struct MemberFit<'a> {
    pub network: &'a NetworkConfig,
    pub meta: &'a EnvMeta,
    pub decay: f64,
    pub seed: u64,
    pub member: usize,
    pub weights: Option<Vec<f64>>,
    pub offset: Option<&'a DMatrix<f64>>,
    pub dropout_rate: f64,
}

/// Xavier-initialised network trained with Adam. Initialisation and batch
/// order depend only on `(seed, member)`.
pub(super) fn fit_member(fit: MemberFit<'_>, dataset: &Dataset) -> Result<MlpParams> {
    let dims = fit.network.dims(fit.meta);
    let mut init_rng = derive_rng(fit.seed, &[stream::INIT, fit.member as u64]);
    let init = MlpParams::xavier(&dims, XavierInit::Normal, &mut init_rng)?;
    let config = TrainConfig {
        l2_decay_scale: fit.decay,
        learning_rate: fit.network.learning_rate,
        num_steps: fit.network.steps,
        batch_size: fit.network.batch_size.unwrap_or_else(|| default_batch_size(dataset.len())),
        per_example_weights: fit.weights,
        seed: derive_seed(fit.seed, &[stream::AGENT, fit.member as u64]),
        adam: Default::default(),
    };
    let options = TrainOptions {
        logit_offset: fit.offset,
        dropout_rate: fit.dropout_rate,
    };
    nncore::train_with(&init, dataset, &config, options)
}

fn bootstrap_weights(kind: Bootstrap, n: usize, seed: u64, member: usize) -> Option<Vec<f64>> {
    let mut rng = derive_rng(seed, &[stream::BOOTSTRAP, member as u64]);
    match kind {
        Bootstrap::None => None,
        Bootstrap::Exponential => Some((0..n).map(|_| Exp1.sample(&mut rng)).collect()),
        Bootstrap::Bernoulli => {
            let coin = Bernoulli::new(0.5).expect("valid");
            Some((0..n).map(|_| if coin.sample(&mut rng) { 2.0 } else { 0.0 }).collect())
        }
    }
}

pub(super) fn train(cfg: &EnsembleConfig, dataset: &Dataset, meta: &EnvMeta, seed: u64) -> Result<EnsembleSampler> {
    let decay = cfg.decay_form.scale(cfg.lambda, meta) / cfg.size as f64;
    let prior_scale = cfg.prior_scale.value(meta.temperature);
    let prior_config = GenerativeConfig {
        input_dim: meta.input_dim,
        num_classes: meta.num_classes,
        temperature: meta.temperature,
        hidden: vec![cfg.network.hidden; cfg.network.layers],
        init: XavierInit::Normal,
    };
    let fitted: Vec<(MlpParams, Option<PriorFunction>)> = (0..cfg.size)
        .map(|i| {
            let prior = if prior_scale != 0.0 {
                Some(PriorFunction {
                    net: sample_mlp(&prior_config, derive_seed(seed, &[stream::PRIOR, i as u64]))?,
                    // the generating process divides its logits by the temperature
                    scale: prior_scale / meta.temperature,
                })
            } else {
                None
            };
            let offset = prior.as_ref().map(|p| p.logits(&dataset.inputs)).transpose()?;
            let net = fit_member(
                MemberFit {
                    network: &cfg.network,
                    meta,
                    decay,
                    seed,
                    member: i,
                    weights: bootstrap_weights(cfg.bootstrap, dataset.len(), seed, i),
                    offset: offset.as_ref(),
                    dropout_rate: 0.0,
                },
                dataset,
            )?;
            Ok((net, prior))
        })
        .collect::<Result<_>>()?;
    let (members, priors): (Vec<_>, Vec<_>) = fitted.into_iter().unzip();
    Ok(EnsembleSampler { members, priors })
}
