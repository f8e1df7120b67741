use nalgebra::DMatrix;

use super::spec::KnnConfig;
use super::{EnvMeta, PosteriorSampler};
use crate::data::Dataset;
use crate::error::Result;

pub const KNN_PROB_FLOOR: f64 = 0.01;
pub const KNN_PROB_CEILING: f64 = 0.99;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KnnWeighting {
    Uniform,
    /// Inverse Euclidean distance. Neighbours at distance zero, if any, take
    /// all of the weight.
    Distance,
}

/// Point-estimate k-nearest-neighbour classifier.
#[derive(Debug, Clone)]
pub struct KnnSampler {
    train: Dataset,
    num_classes: usize,
    k: usize,
    weighting: KnnWeighting,
}

impl KnnSampler {
    pub fn new(train: Dataset, num_classes: usize, k: usize, weighting: KnnWeighting) -> Self {
        let k = k.clamp(1, train.len().max(1));
        KnnSampler {
            train,
            num_classes,
            k,
            weighting,
        }
    }

    /// Class probabilities for one input before truncation.
    pub fn raw_row(&self, x: &[f64]) -> Vec<f64> {
        let mut dist: Vec<(f64, usize)> = (0..self.train.len())
            .map(|i| {
                let d2: f64 = x.iter().enumerate().map(|(j, v)| (v - self.train.inputs[(i, j)]).powi(2)).sum();
                (d2.sqrt(), i)
            })
            .collect();
        // stable sort keeps the lower training index first on ties
        dist.sort_by(|a, b| a.0.total_cmp(&b.0));
        let neighbours = &dist[..self.k];
        let exact: Vec<&(f64, usize)> = neighbours.iter().filter(|(d, _)| *d == 0.0).collect();
        let mut row = vec![0.0; self.num_classes];
        match self.weighting {
            KnnWeighting::Distance if exact.is_empty() => {
                for &(d, i) in neighbours {
                    row[self.train.labels[i]] += 1.0 / d;
                }
            }
            KnnWeighting::Distance => {
                for &&(_, i) in &exact {
                    row[self.train.labels[i]] += 1.0;
                }
            }
            KnnWeighting::Uniform => {
                for &(_, i) in neighbours {
                    row[self.train.labels[i]] += 1.0;
                }
            }
        }
        let total: f64 = row.iter().sum();
        row.iter_mut().for_each(|p| *p /= total);
        row
    }

    /// Truncated to `[KNN_PROB_FLOOR, KNN_PROB_CEILING]`, not yet renormalised.
    pub fn truncated_row(&self, x: &[f64]) -> Vec<f64> {
        self.raw_row(x)
            .into_iter()
            .map(|p| p.clamp(KNN_PROB_FLOOR, KNN_PROB_CEILING))
            .collect()
    }

    pub fn probs(&self, inputs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        crate::data::check_width(inputs, self.train.input_dim())?;
        let mut out = DMatrix::zeros(inputs.nrows(), self.num_classes);
        for r in 0..inputs.nrows() {
            let x: Vec<f64> = inputs.row(r).iter().copied().collect();
            let row = self.truncated_row(&x);
            let total: f64 = row.iter().sum();
            for (c, p) in row.into_iter().enumerate() {
                out[(r, c)] = p / total;
            }
        }
        Ok(out)
    }
}

impl PosteriorSampler for KnnSampler {
    fn input_dim(&self) -> usize {
        self.train.input_dim()
    }

    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn model_probs(&self, inputs: &DMatrix<f64>, _seed: u64, _index: usize) -> Result<DMatrix<f64>> {
        self.probs(inputs)
    }
}

pub(super) fn train(cfg: &KnnConfig, dataset: &Dataset, meta: &EnvMeta) -> Result<KnnSampler> {
    Ok(KnnSampler::new(dataset.clone(), meta.num_classes, cfg.k, cfg.weighting))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn line() -> Dataset {
        Dataset::new(DMatrix::from_row_slice(4, 1, &[0.0, 1.0, 2.0, 3.0]), vec![0, 1, 1, 0]).unwrap()
    }

    #[test]
    fn one_neighbour_on_a_training_point_is_truncated_one_hot() {
        let knn = KnnSampler::new(line(), 2, 1, KnnWeighting::Uniform);
        let p = knn.probs(&DMatrix::from_row_slice(1, 1, &[1.0])).unwrap();
        assert_eq!((p[(0, 0)], p[(0, 1)]), (0.01, 0.99));
    }

    #[test]
    fn three_classes_renormalise_after_truncation() {
        let ds = Dataset::new(DMatrix::from_row_slice(1, 1, &[0.0]), vec![2]).unwrap();
        let knn = KnnSampler::new(ds, 3, 1, KnnWeighting::Uniform);
        let p = knn.probs(&DMatrix::from_row_slice(1, 1, &[5.0])).unwrap();
        assert!((p[(0, 2)] - 0.99 / 1.01).abs() < 1e-15);
        assert!((p[(0, 0)] - 0.01 / 1.01).abs() < 1e-15);
    }

    #[test]
    fn ties_prefer_the_lower_index() {
        // 0.5 is equidistant from points 0 (label 0) and 1 (label 1)
        let knn = KnnSampler::new(line(), 2, 1, KnnWeighting::Uniform);
        assert_eq!(knn.raw_row(&[0.5]), vec![1.0, 0.0]);
    }

    #[test]
    fn distance_weighting() {
        let knn = KnnSampler::new(line(), 2, 2, KnnWeighting::Distance);
        // neighbours 0 (d = 0.25, label 0) and 1 (d = 0.75, label 1)
        let row = knn.raw_row(&[0.25]);
        assert!((row[0] - 0.75).abs() < 1e-12);
        let exact = knn.raw_row(&[1.0]);
        assert_eq!(exact, vec![0.0, 1.0]);
    }

    #[test]
    fn k_is_clamped_to_the_training_size() {
        let knn = KnnSampler::new(line(), 2, 50, KnnWeighting::Uniform);
        assert_eq!(knn.raw_row(&[10.0]), vec![0.5, 0.5]);
    }

    proptest! {
        #[test]
        fn truncated_probabilities_stay_in_bounds(x in -5.0f64..5.0, k in 1usize..6, distance in any::<bool>()) {
            let weighting = if distance { KnnWeighting::Distance } else { KnnWeighting::Uniform };
            let knn = KnnSampler::new(line(), 2, k, weighting);
            for p in knn.truncated_row(&[x]) {
                prop_assert!((KNN_PROB_FLOOR..=KNN_PROB_CEILING).contains(&p));
            }
            let probs = knn.probs(&DMatrix::from_row_slice(1, 1, &[x])).unwrap();
            prop_assert!((probs.row(0).sum() - 1.0).abs() < 1e-12);
        }
    }
}
