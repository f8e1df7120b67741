//! Likelihood of a block of test labels under an agent's belief.
//!
//! An agent's belief is represented by `M` sampled models, each giving a
//! `tau × K` table of class probabilities on the block's inputs
//! ([`ProbMatrix`]). Two estimators are provided:
//!
//! - [`mc_log_likelihood`] averages the per-model joint likelihoods. It is
//!   unbiased but needs exponentially many models in `tau` when the models
//!   disagree sharply.
//! - [`partition_log_likelihood`] hashes every model's probit vector with `d`
//!   random hyperplanes, averages the tables of models that share a cell and
//!   mixes the cells by occupancy.
//!
//! [`brute_force_log_likelihood`] enumerates the full joint distribution of an
//! explicit mixture and serves as the exact oracle for small instances.
//! Everything is accumulated in the log domain.

pub mod probit;

use std::collections::BTreeMap;

use rand_distr::{Distribution, StandardNormal};

pub use self::probit::{inverse_normal_cdf, normal_cdf};
use crate::error::{Error, Result};
use crate::seeding::rng_from_seed;

/// Row-sum tolerance of a [`ProbMatrix`].
pub const ROW_SUM_TOLERANCE: f64 = 1e-9;

/// Largest joint outcome space `K^tau` the brute-force oracle will enumerate.
pub const MAX_ENUMERATION: usize = 4096;

/// Per-model, per-step, per-class probabilities `p[m, t, k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMatrix {
    num_models: usize,
    tau: usize,
    num_classes: usize,
    values: Vec<f64>,
}

impl ProbMatrix {
    pub fn new(num_models: usize, tau: usize, num_classes: usize, values: Vec<f64>) -> Result<Self> {
        if num_models == 0 || tau == 0 || num_classes == 0 {
            return Err(Error::shape("probability tensor dimensions must be positive"));
        }
        if values.len() != num_models * tau * num_classes {
            return Err(Error::shape(format!(
                "{} values for a {num_models}×{tau}×{num_classes} tensor",
                values.len()
            )));
        }
        for (i, row) in values.chunks(num_classes).enumerate() {
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::domain(format!(
                    "model {} step {} has entries outside [0, 1]",
                    i / tau,
                    i % tau
                )));
            }
            let total: f64 = row.iter().sum();
            if (total - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Err(Error::domain(format!(
                    "model {} step {} sums to {total}",
                    i / tau,
                    i % tau
                )));
            }
        }
        Ok(ProbMatrix {
            num_models,
            tau,
            num_classes,
            values,
        })
    }

    /// Stack per-model `tau × K` tables.
    pub fn from_tables(tables: &[nalgebra::DMatrix<f64>]) -> Result<Self> {
        let first = tables.first().ok_or_else(|| Error::shape("at least one model is required"))?;
        let (tau, k) = first.shape();
        let mut values = Vec::with_capacity(tables.len() * tau * k);
        for (m, table) in tables.iter().enumerate() {
            if table.shape() != (tau, k) {
                return Err(Error::shape(format!("model {m} table has shape {:?}", table.shape())));
            }
            for t in 0..tau {
                values.extend(table.row(t).iter());
            }
        }
        ProbMatrix::new(tables.len(), tau, k, values)
    }

    pub fn num_models(&self) -> usize {
        self.num_models
    }

    pub fn tau(&self) -> usize {
        self.tau
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, m: usize, t: usize, k: usize) -> f64 {
        self.values[(m * self.tau + t) * self.num_classes + k]
    }

    /// The `tau * K` probabilities of one model, in `(t, k)` order.
    pub fn model(&self, m: usize) -> &[f64] {
        let width = self.tau * self.num_classes;
        &self.values[m * width..(m + 1) * width]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// A tensor holding the models at `indices`, in that order.
    pub fn select_models(&self, indices: &[usize]) -> Self {
        let values = indices.iter().flat_map(|&m| self.model(m).iter().copied()).collect();
        ProbMatrix {
            num_models: indices.len(),
            tau: self.tau,
            num_classes: self.num_classes,
            values,
        }
    }

    fn check_labels(&self, labels: &[usize]) -> Result<()> {
        if labels.len() != self.tau {
            return Err(Error::shape(format!("{} labels for a block of {}", labels.len(), self.tau)));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= self.num_classes) {
            return Err(Error::domain(format!("label {bad} outside [0, {})", self.num_classes)));
        }
        Ok(())
    }

    /// `sum_t ln p[m, t, labels[t]]`.
    pub fn model_log_likelihood(&self, m: usize, labels: &[usize]) -> f64 {
        labels.iter().enumerate().map(|(t, &y)| self.get(m, t, y).ln()).sum()
    }
}

/// `ln sum_i exp(x_i)`; `-inf` when every term is `-inf`.
pub fn log_sum_exp(xs: impl IntoIterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().into_iter().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY || max.is_nan() {
        return max;
    }
    if max == f64::INFINITY {
        return max;
    }
    max + xs.into_iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Log of the average, over models, of each model's joint likelihood of
/// `labels`.
pub fn mc_log_likelihood(probs: &ProbMatrix, labels: &[usize]) -> Result<f64> {
    probs.check_labels(labels)?;
    let per_model = (0..probs.num_models).map(|m| probs.model_log_likelihood(m, labels));
    Ok(log_sum_exp(per_model.collect::<Vec<_>>()) - (probs.num_models as f64).ln())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PartitionConfig {
    pub num_hyperplanes: usize,
    pub seed: u64,
    /// Probabilities are clipped to `[clip, 1 - clip]` before the probit.
    pub probit_clip: f64,
}

pub const DEFAULT_PROBIT_CLIP: f64 = 1e-6;

impl PartitionConfig {
    pub fn new(num_hyperplanes: usize, seed: u64) -> Self {
        PartitionConfig {
            num_hyperplanes,
            seed,
            probit_clip: DEFAULT_PROBIT_CLIP,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_hyperplanes > 64 {
            return Err(Error::usage("at most 64 hyperplanes are supported"));
        }
        if !(self.probit_clip > 0.0 && self.probit_clip < 0.5) {
            return Err(Error::domain(format!("probit clip {} outside (0, 0.5)", self.probit_clip)));
        }
        Ok(())
    }
}

/// Random hyperplanes `A` (`d × width`, row-major) and offsets `b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Hyperplanes {
    pub normals: Vec<f64>,
    pub offsets: Vec<f64>,
    pub width: usize,
}

impl Hyperplanes {
    /// Entries of `A` first (row by row), then `b`, all i.i.d. standard normal.
    pub fn sample(num_hyperplanes: usize, width: usize, seed: u64) -> Self {
        let mut rng = rng_from_seed(seed);
        let normals = (0..num_hyperplanes * width).map(|_| StandardNormal.sample(&mut rng)).collect();
        let offsets = (0..num_hyperplanes).map(|_| StandardNormal.sample(&mut rng)).collect();
        Hyperplanes {
            normals,
            offsets,
            width,
        }
    }

    /// Bit `i` is set when `A_i . x + b_i >= 0`.
    pub fn cell(&self, x: &[f64]) -> u64 {
        self.offsets.iter().enumerate().fold(0u64, |key, (i, &b)| {
            let row = &self.normals[i * self.width..(i + 1) * self.width];
            let s: f64 = row.iter().zip(x).map(|(a, v)| a * v).sum::<f64>() + b;
            if s >= 0.0 {
                key | (1 << i)
            } else {
                key
            }
        })
    }
}

/// Probit vector of one model: `Phi^-1` of its clipped probabilities in `(t, k)` order.
pub fn probit_vector(probs: &ProbMatrix, m: usize, clip: f64) -> Vec<f64> {
    probs
        .model(m)
        .iter()
        .map(|&p| inverse_normal_cdf(p.clamp(clip, 1.0 - clip)).expect("clipped into (0, 1)"))
        .collect()
}

/// Cells of the random partition with the models they contain, keyed by sign pattern.
pub fn partition_cells(probs: &ProbMatrix, config: &PartitionConfig) -> Result<BTreeMap<u64, Vec<usize>>> {
    config.validate()?;
    let width = probs.tau * probs.num_classes;
    let planes = Hyperplanes::sample(config.num_hyperplanes, width, config.seed);
    let mut cells: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for m in 0..probs.num_models {
        let key = if config.num_hyperplanes == 0 {
            0
        } else {
            planes.cell(&probit_vector(probs, m, config.probit_clip))
        };
        cells.entry(key).or_default().push(m);
    }
    Ok(cells)
}

/// Random-partition estimate of the log-likelihood of `labels`.
///
/// Only occupied cells are materialised; an empty cell has weight zero and
/// contributes nothing.
pub fn partition_log_likelihood(probs: &ProbMatrix, labels: &[usize], config: &PartitionConfig) -> Result<f64> {
    probs.check_labels(labels)?;
    let cells = partition_cells(probs, config)?;
    let total = probs.num_models as f64;
    let terms: Vec<f64> = cells
        .values()
        .map(|members| {
            let size = members.len() as f64;
            let joint: f64 = labels
                .iter()
                .enumerate()
                .map(|(t, &y)| (members.iter().map(|&m| probs.get(m, t, y)).sum::<f64>() / size).ln())
                .sum();
            (size / total).ln() + joint
        })
        .collect();
    Ok(log_sum_exp(terms))
}

/// An explicit finite mixture of models.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureBelief {
    pub weights: Vec<f64>,
    pub members: ProbMatrix,
}

impl MixtureBelief {
    pub fn new(weights: Vec<f64>, members: ProbMatrix) -> Result<Self> {
        if weights.len() != members.num_models() {
            return Err(Error::shape("one weight per mixture member is required"));
        }
        if weights.iter().any(|&w| !(w >= 0.0 && w.is_finite())) {
            return Err(Error::domain("mixture weights must be nonnegative"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > ROW_SUM_TOLERANCE {
            return Err(Error::domain(format!("mixture weights sum to {total}")));
        }
        Ok(MixtureBelief { weights, members })
    }

    pub fn uniform(members: ProbMatrix) -> Self {
        let n = members.num_models();
        MixtureBelief {
            weights: vec![1.0 / n as f64; n],
            members,
        }
    }
}

/// Full joint distribution of the mixture over all `K^tau` label sequences,
/// indexed with the first step as the most significant digit.
pub fn joint_distribution(belief: &MixtureBelief) -> Result<Vec<f64>> {
    let probs = &belief.members;
    let (tau, k) = (probs.tau(), probs.num_classes());
    let size = u32::try_from(tau)
        .ok()
        .and_then(|tau| k.checked_pow(tau))
        .filter(|&s| s <= MAX_ENUMERATION)
        .ok_or_else(|| {
            Error::usage(format!("{k}^{tau} joint outcomes exceed the enumeration limit {MAX_ENUMERATION}"))
        })?;
    let mut joint = vec![0.0; size];
    let mut table = Vec::with_capacity(size);
    let mut next = Vec::with_capacity(size);
    for (m, &w) in belief.weights.iter().enumerate() {
        table.clear();
        table.push(w);
        for t in 0..tau {
            next.clear();
            for &prefix in &table {
                next.extend((0..k).map(|c| prefix * probs.get(m, t, c)));
            }
            std::mem::swap(&mut table, &mut next);
        }
        for (j, v) in joint.iter_mut().zip(&table) {
            *j += v;
        }
    }
    Ok(joint)
}

/// Exact log-likelihood of `labels` under the mixture, read off the
/// enumerated joint distribution.
pub fn brute_force_log_likelihood(belief: &MixtureBelief, labels: &[usize]) -> Result<f64> {
    belief.members.check_labels(labels)?;
    let joint = joint_distribution(belief)?;
    let total: f64 = joint.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::domain(format!("joint distribution sums to {total}")));
    }
    let k = belief.members.num_classes();
    let index = labels.iter().fold(0usize, |acc, &y| acc * k + y);
    Ok(joint[index].ln())
}
