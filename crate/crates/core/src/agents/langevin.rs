use rand_distr::{Distribution, StandardNormal};

use super::ensemble::EnsembleSampler;
use super::spec::SgldConfig;
use super::EnvMeta;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nncore::{data_gradient, default_batch_size, minibatch_indices, rows_of, MlpParams, XavierInit};
use crate::seeding::{derive_rng, stream, TestbedRng};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LangevinConfig {
    pub learning_rate: f64,
    pub burn_in: usize,
    /// Steps between consecutive snapshots.
    pub thin: usize,
    pub num_snapshots: usize,
    /// 0 for plain SGLD; otherwise the momentum coefficient of the
    /// underdamped variant.
    pub momentum: f64,
}

impl Default for LangevinConfig {
    fn default() -> Self {
        LangevinConfig {
            learning_rate: 1e-4,
            burn_in: 10_000,
            thin: 200,
            num_snapshots: 50,
            momentum: 0.0,
        }
    }
}

/// Run a Langevin chain on a potential `U` and return the thinned snapshots.
///
/// `grad` receives the current point and a minibatch RNG and returns an
/// estimate of `grad U`. Plain steps are
/// `theta <- theta - lr * grad + sqrt(2 lr) * xi`; with momentum `m`,
/// `v <- m v - lr * grad + sqrt(2 (1 - m) lr) * xi` and `theta <- theta + v`.
pub fn langevin_chain<F>(init: Vec<f64>, config: &LangevinConfig, seed: u64, mut grad: F) -> Result<Vec<Vec<f64>>>
where
    F: FnMut(&[f64], &mut TestbedRng) -> Result<Vec<f64>>,
{
    if !(config.learning_rate > 0.0 && config.learning_rate.is_finite()) {
        return Err(Error::domain("learning rate must be positive"));
    }
    if !(0.0..1.0).contains(&config.momentum) {
        return Err(Error::domain("momentum must lie in [0, 1)"));
    }
    if config.thin == 0 || config.num_snapshots == 0 {
        return Err(Error::usage("thin and num_snapshots must be at least 1"));
    }
    let mut noise_rng = derive_rng(seed, &[stream::NOISE]);
    let mut batch_rng = derive_rng(seed, &[stream::BATCHES]);
    let lr = config.learning_rate;
    let noise_scale = (2.0 * (1.0 - config.momentum) * lr).sqrt();
    let mut theta = init;
    let mut velocity = vec![0.0; theta.len()];
    let mut snapshots = Vec::with_capacity(config.num_snapshots);
    let total = config.burn_in + config.thin * config.num_snapshots;
    for step in 1..=total {
        let g = grad(&theta, &mut batch_rng)?;
        if g.len() != theta.len() {
            return Err(Error::shape("gradient length differs from the parameter length"));
        }
        for i in 0..theta.len() {
            let xi: f64 = StandardNormal.sample(&mut noise_rng);
            if config.momentum == 0.0 {
                theta[i] += -lr * g[i] + noise_scale * xi;
            } else {
                velocity[i] = config.momentum * velocity[i] - lr * g[i] + noise_scale * xi;
                theta[i] += velocity[i];
            }
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain(format!("Langevin chain diverged at step {step}")));
        }
        if step > config.burn_in && (step - config.burn_in) % config.thin == 0 {
            snapshots.push(theta.clone());
        }
    }
    Ok(snapshots)
}

pub(super) fn train(cfg: &SgldConfig, dataset: &Dataset, meta: &EnvMeta, seed: u64) -> Result<EnsembleSampler> {
    let t = dataset.len() as f64;
    // Gaussian prior on every parameter with variance lambda T / (D beta)
    let prior_var = cfg.lambda * t / (meta.input_dim as f64 * meta.temperature);
    let dims: Vec<usize> = std::iter::once(meta.input_dim)
        .chain(std::iter::repeat_n(cfg.hidden, cfg.layers))
        .chain(std::iter::once(meta.num_classes))
        .collect();
    let template = MlpParams::xavier(&dims, XavierInit::Normal, &mut derive_rng(seed, &[stream::INIT, 0]))?;
    let batch_size = cfg.batch_size.unwrap_or_else(|| default_batch_size(dataset.len()));
    let mut work = template.clone();
    let grad = |theta: &[f64], rng: &mut TestbedRng| -> Result<Vec<f64>> {
        work.set_flat(theta);
        let (_, g) = match minibatch_indices(dataset.len(), batch_size, rng) {
            None => data_gradient(&work, &dataset.inputs, &dataset.labels, None),
            Some(rows) => {
                let labels: Vec<usize> = rows.iter().map(|&i| dataset.labels[i]).collect();
                data_gradient(&work, &rows_of(&dataset.inputs, &rows), &labels, None)
            }
        };
        Ok(g.to_flat()
            .iter()
            .zip(theta)
            .map(|(gi, th)| t * gi + th / prior_var)
            .collect())
    };
    let snapshots = langevin_chain(template.to_flat(), &cfg.chain, seed, grad)?;
    let members = snapshots
        .iter()
        .map(|flat| {
            let mut net = template.clone();
            net.set_flat(flat);
            net
        })
        .collect();
    EnsembleSampler::from_members(members)
}
