use nalgebra::{DMatrix, DVector};
use rand_distr::{Bernoulli, Distribution};

use super::ensemble::{fit_member, MemberFit};
use super::spec::{DropoutConfig, DropoutDecay};
use super::{model_seed, EnvMeta, PosteriorSampler};
use crate::data::Dataset;
use crate::error::Result;
use crate::nncore::{self, Layer, MlpParams};
use crate::seeding::{derive_rng, stream};

/// MC dropout: each sampled model is the trained network under one fresh
/// mask over the hidden units.
#[derive(Debug, Clone)]
pub struct DropoutSampler {
    net: MlpParams,
    rate: f64,
}

impl DropoutSampler {
    pub fn new(net: MlpParams, rate: f64) -> Self {
        DropoutSampler { net, rate }
    }

    fn masks(&self, seed: u64, index: usize) -> Vec<DVector<f64>> {
        let mut rng = derive_rng(model_seed(seed, index), &[stream::DROPOUT]);
        let keep = Bernoulli::new(1.0 - self.rate).expect("rate validated");
        let scale = 1.0 / (1.0 - self.rate);
        self.net.layers[..self.net.layers.len() - 1]
            .iter()
            .map(Layer::fan_out)
            .map(|w| DVector::from_fn(w, |_, _| if keep.sample(&mut rng) { scale } else { 0.0 }))
            .collect()
    }
}

impl PosteriorSampler for DropoutSampler {
    fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    fn num_classes(&self) -> usize {
        self.net.output_dim()
    }

    fn model_probs(&self, inputs: &DMatrix<f64>, seed: u64, index: usize) -> Result<DMatrix<f64>> {
        let logits = self.net.forward_masked(inputs, &self.masks(seed, index))?;
        nncore::softmax_rows(&logits, 1.0)
    }
}

pub(super) fn train(cfg: &DropoutConfig, dataset: &Dataset, meta: &EnvMeta, seed: u64) -> Result<DropoutSampler> {
    let t = meta.train_size.max(1) as f64;
    let decay = match cfg.decay {
        DropoutDecay::LengthScale => cfg.length_scale.powi(2) * (1.0 - cfg.rate) / (2.0 * t),
        DropoutDecay::InputTemperature => meta.input_dim as f64 * meta.temperature.sqrt() * cfg.length_scale / t,
    };
    let net = fit_member(
        MemberFit {
            network: &cfg.network,
            meta,
            decay,
            seed,
            member: 0,
            weights: None,
            offset: None,
            dropout_rate: cfg.rate,
        },
        dataset,
    )?;
    Ok(DropoutSampler::new(net, cfg.rate))
}
