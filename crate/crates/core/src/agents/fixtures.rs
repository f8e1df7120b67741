use nalgebra::DMatrix;

use super::{model_seed, PosteriorSampler};
use crate::error::{Error, Result};
use crate::generative::sample_label;
use crate::likelihood::ROW_SUM_TOLERANCE;
use crate::seeding::{derive_rng, stream};

/// Finite mixture of input-independent models: component `c` predicts
/// `rows[c]` for every input and is drawn with probability `weights[c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstantMixtureSampler {
    input_dim: usize,
    weights: Vec<f64>,
    rows: Vec<Vec<f64>>,
}

impl ConstantMixtureSampler {
    pub fn new(input_dim: usize, weights: Vec<f64>, rows: Vec<Vec<f64>>) -> Result<Self> {
        if weights.is_empty() || weights.len() != rows.len() {
            return Err(Error::shape("one weight per component is required"));
        }
        let k = rows[0].len();
        if k < 2 || rows.iter().any(|r| r.len() != k) {
            return Err(Error::shape("components must share at least two classes"));
        }
        for row in &rows {
            if row.iter().any(|&p| !(0.0..=1.0).contains(&p)) || (row.iter().sum::<f64>() - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Err(Error::domain("component rows must be probability vectors"));
            }
        }
        let total: f64 = weights.iter().sum();
        if weights.iter().any(|&w| !(w >= 0.0 && w.is_finite())) || !(total > 0.0) {
            return Err(Error::domain("mixture weights must be nonnegative with positive sum"));
        }
        let weights = weights.into_iter().map(|w| w / total).collect();
        Ok(ConstantMixtureSampler { input_dim, weights, rows })
    }

    /// Coin belief over `(weight, p_heads)` pairs; class 1 is heads.
    pub fn coin(components: &[(f64, f64)]) -> Result<Self> {
        let weights = components.iter().map(|c| c.0).collect();
        let rows = components.iter().map(|&(_, p)| vec![1.0 - p, p]).collect();
        Self::new(1, weights, rows)
    }

    /// A single model predicting the uniform distribution everywhere.
    pub fn uniform(input_dim: usize, num_classes: usize) -> Result<Self> {
        Self::new(input_dim, vec![1.0], vec![vec![1.0 / num_classes as f64; num_classes]])
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn component(&self, seed: u64, index: usize) -> usize {
        if self.weights.len() == 1 {
            return 0;
        }
        let mut rng = derive_rng(model_seed(seed, index), &[stream::MODELS]);
        sample_label(self.weights.iter().copied(), &mut rng)
    }
}

impl PosteriorSampler for ConstantMixtureSampler {
    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn num_classes(&self) -> usize {
        self.rows[0].len()
    }

    fn model_probs(&self, inputs: &DMatrix<f64>, seed: u64, index: usize) -> Result<DMatrix<f64>> {
        let row = &self.rows[self.component(seed, index)];
        Ok(DMatrix::from_fn(inputs.nrows(), row.len(), |_, c| row[c]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coin_mixture_draws_components_in_proportion() {
        let s = ConstantMixtureSampler::coin(&[(1.0, 0.0), (2.0, 1.0)]).unwrap();
        let heads = (0..3000).filter(|&i| s.component(4, i) == 1).count();
        assert!((1850..2150).contains(&heads), "{heads}");
        let p = s.model_probs(&DMatrix::zeros(3, 1), 4, 0).unwrap();
        assert_eq!(p.nrows(), 3);
        assert!(p.row(0).iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn invalid_fixtures_are_rejected() {
        assert!(ConstantMixtureSampler::new(1, vec![1.0], vec![vec![0.6, 0.6]]).is_err());
        assert!(ConstantMixtureSampler::new(1, vec![1.0, 1.0], vec![vec![0.5, 0.5]]).is_err());
        assert!(ConstantMixtureSampler::new(1, vec![0.0], vec![vec![0.5, 0.5]]).is_err());
        assert!(ConstantMixtureSampler::uniform(2, 3).is_ok());
    }
}
