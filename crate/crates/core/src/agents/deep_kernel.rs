use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};

use super::ensemble::{fit_member, MemberFit};
use super::spec::DeepKernelConfig;
use super::{model_seed, EnvMeta, PosteriorSampler};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::likelihood::ProbMatrix;
use crate::nncore::{self, MlpParams};
use crate::seeding::{derive_rng, stream};

pub const DEFAULT_GP_NOISE: f64 = 1.0;

fn cholesky_factor(features: &DMatrix<f64>, noise: f64) -> Result<DMatrix<f64>> {
    let width = features.ncols();
    let gram = DMatrix::identity(width, width) * noise.powi(2) + features.transpose() * features;
    gram.cholesky()
        .map(|c| c.l())
        .ok_or_else(|| Error::domain("feature Gram matrix is not positive definite"))
}

/// `sigma^2 Phi_* (sigma^2 I + Phi^T Phi)^{-1} Phi_*^T`, inverting a
/// width-by-width matrix.
pub fn gp_covariance_woodbury(test: &DMatrix<f64>, train: &DMatrix<f64>, noise: f64) -> Result<DMatrix<f64>> {
    if test.ncols() != train.ncols() {
        return Err(Error::shape("test and train features differ in width"));
    }
    let l = cholesky_factor(train, noise)?;
    let b = whiten(&l, test)?;
    Ok(&b * b.transpose() * noise.powi(2))
}

/// `Phi_* Phi_*^T - Phi_* Phi^T (sigma^2 I + Phi Phi^T)^{-1} Phi Phi_*^T`,
/// inverting a train-by-train matrix.
pub fn gp_covariance_direct(test: &DMatrix<f64>, train: &DMatrix<f64>, noise: f64) -> Result<DMatrix<f64>> {
    if test.ncols() != train.ncols() {
        return Err(Error::shape("test and train features differ in width"));
    }
    let n = train.nrows();
    let kernel = DMatrix::identity(n, n) * noise.powi(2) + train * train.transpose();
    let cross = train * test.transpose();
    let solved = kernel
        .cholesky()
        .ok_or_else(|| Error::domain("kernel matrix is not positive definite"))?
        .solve(&cross);
    Ok(test * test.transpose() - cross.transpose() * solved)
}

/// `Phi_* L^{-T}` for lower-triangular `L`.
fn whiten(l: &DMatrix<f64>, test: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let solved = l
        .solve_lower_triangular(&test.transpose())
        .ok_or_else(|| Error::domain("singular Cholesky factor"))?;
    Ok(solved.transpose())
}

/// Gaussian-process head on the frozen last-hidden-layer features of a
/// trained network. Sampled logits are `mu + sigma Phi_* L^{-T} zeta` with `mu`
/// the network's own logits and `zeta` a standard normal `width × K` matrix.
#[derive(Debug, Clone)]
pub struct DeepKernelSampler {
    net: MlpParams,
    chol: DMatrix<f64>,
    noise: f64,
}

impl DeepKernelSampler {
    pub fn new(net: MlpParams, train_inputs: &DMatrix<f64>, noise: f64) -> Result<Self> {
        let chol = cholesky_factor(&net.features(train_inputs)?, noise)?;
        Ok(DeepKernelSampler { net, chol, noise })
    }

    fn draw(&self, mean: &DMatrix<f64>, whitened: &DMatrix<f64>, seed: u64, index: usize) -> Result<DMatrix<f64>> {
        let mut rng = derive_rng(model_seed(seed, index), &[stream::NOISE]);
        let zeta = DMatrix::from_fn(whitened.ncols(), mean.ncols(), |_, _| StandardNormal.sample(&mut rng));
        nncore::softmax_rows(&(mean + whitened * zeta * self.noise), 1.0)
    }

    fn parts(&self, inputs: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let mean = self.net.forward(inputs)?;
        let whitened = whiten(&self.chol, &self.net.features(inputs)?)?;
        Ok((mean, whitened))
    }
}

impl PosteriorSampler for DeepKernelSampler {
    fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    fn num_classes(&self) -> usize {
        self.net.output_dim()
    }

    fn model_probs(&self, inputs: &DMatrix<f64>, seed: u64, index: usize) -> Result<DMatrix<f64>> {
        let (mean, whitened) = self.parts(inputs)?;
        self.draw(&mean, &whitened, seed, index)
    }

    fn sample_probs(&self, inputs: &DMatrix<f64>, num_models: usize, seed: u64) -> Result<ProbMatrix> {
        let (mean, whitened) = self.parts(inputs)?;
        let tables = (0..num_models)
            .map(|m| self.draw(&mean, &whitened, seed, m))
            .collect::<Result<Vec<_>>>()?;
        ProbMatrix::from_tables(&tables)
    }
}

pub(super) fn train(cfg: &DeepKernelConfig, dataset: &Dataset, meta: &EnvMeta, seed: u64) -> Result<DeepKernelSampler> {
    let net = fit_member(
        MemberFit {
            network: &cfg.network,
            meta,
            decay: cfg.decay_form.scale(cfg.lambda, meta),
            seed,
            member: 0,
            weights: None,
            offset: None,
            dropout_rate: 0.0,
        },
        dataset,
    )?;
    DeepKernelSampler::new(net, &dataset.inputs, cfg.noise)
}
