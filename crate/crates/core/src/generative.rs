//! Synthetic data generating processes.
//!
//! [`Environment`] is a randomly drawn 2-hidden-layer ReLU classifier whose
//! logits are divided by a temperature before the softmax; inputs are standard
//! normal. [`CoinEnvironment`] is the input-free biased coin used as an exact
//! reference for marginal versus joint likelihoods.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

pub use crate::data::{Dataset, TauSample};
use crate::error::{Error, Result};
use crate::nncore::{self, Layer, MlpParams, XavierInit};
use crate::seeding::rng_from_seed;

/// Variance of the first-layer biases of a sampled environment.
pub const FIRST_LAYER_BIAS_VARIANCE: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerativeConfig {
    pub input_dim: usize,
    pub num_classes: usize,
    pub temperature: f64,
    pub hidden: Vec<usize>,
    pub init: XavierInit,
}

impl Default for GenerativeConfig {
    fn default() -> Self {
        GenerativeConfig {
            input_dim: 2,
            num_classes: 2,
            temperature: 0.1,
            hidden: vec![50, 50],
            init: XavierInit::Normal,
        }
    }
}

impl GenerativeConfig {
    pub fn with_temperature(temperature: f64) -> Self {
        GenerativeConfig {
            temperature,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::domain("num_classes must be at least 2"));
        }
        if self.input_dim == 0 {
            return Err(Error::domain("input_dim must be at least 1"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::domain(format!("temperature must be positive, got {}", self.temperature)));
        }
        if self.hidden.contains(&0) {
            return Err(Error::domain("hidden widths must be positive"));
        }
        Ok(())
    }

    fn layer_dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim)
            .chain(self.hidden.iter().copied())
            .chain(std::iter::once(self.num_classes))
            .collect()
    }
}

/// Ground-truth classifier: `softmax(forward(params, x) / temperature)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Environment {
    pub params: MlpParams,
    pub temperature: f64,
    pub input_dim: usize,
}

/// Xavier weights, first-layer biases drawn from `N(0, 1/2)`, remaining biases zero.
pub fn sample_mlp(config: &GenerativeConfig, seed: u64) -> Result<MlpParams> {
    config.validate()?;
    let mut rng = rng_from_seed(seed);
    let bias_law = Normal::new(0.0, FIRST_LAYER_BIAS_VARIANCE.sqrt()).expect("valid");
    let layers = config
        .layer_dims()
        .windows(2)
        .enumerate()
        .map(|(i, w)| {
            let weights = config.init.sample_weights(w[0], w[1], &mut rng);
            let bias = if i == 0 {
                DVector::from_fn(w[1], |_, _| bias_law.sample(&mut rng))
            } else {
                DVector::zeros(w[1])
            };
            Layer { weights, bias }
        })
        .collect();
    MlpParams::new(layers)
}

pub fn sample_environment(config: &GenerativeConfig, seed: u64) -> Result<Environment> {
    Ok(Environment {
        params: sample_mlp(config, seed)?,
        temperature: config.temperature,
        input_dim: config.input_dim,
    })
}

pub(crate) fn sample_label<R: Rng + ?Sized>(probs: impl Iterator<Item = f64>, rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (k, p) in probs.enumerate() {
        acc += p;
        last = k;
        if u < acc {
            return k;
        }
    }
    last
}

pub(crate) fn standard_normal_inputs<R: Rng + ?Sized>(n: usize, d: usize, rng: &mut R) -> DMatrix<f64> {
    // row-major draw order so a prefix of rows does not depend on n
    let draws: Vec<f64> = (0..n * d).map(|_| StandardNormal.sample(rng)).collect();
    DMatrix::from_row_slice(n, d, &draws)
}

impl Environment {
    pub fn num_classes(&self) -> usize {
        self.params.output_dim()
    }

    /// Untempered network output.
    pub fn logits(&self, inputs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.params.forward(inputs)
    }

    pub fn class_probs(&self, inputs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        nncore::softmax_rows(&self.params.forward(inputs)?, self.temperature)
    }

    /// `n` standard-normal inputs with labels drawn from [`Self::class_probs`].
    pub fn sample_data(&self, n: usize, seed: u64) -> Result<Dataset> {
        if n == 0 {
            return Err(Error::usage("sample size must be at least 1"));
        }
        let mut rng = rng_from_seed(seed);
        let inputs = standard_normal_inputs(n, self.input_dim, &mut rng);
        let probs = self.class_probs(&inputs)?;
        let labels = (0..n).map(|r| sample_label(probs.row(r).iter().copied(), &mut rng)).collect();
        Dataset::new(inputs, labels)
    }

    /// Sum over the block of `log P(label | environment, input)`.
    pub fn log_likelihood(&self, sample: &TauSample) -> Result<f64> {
        sample.check_labels(self.num_classes())?;
        let probs = self.class_probs(&sample.inputs)?;
        Ok(sample.labels.iter().enumerate().map(|(t, &y)| probs[(t, y)].ln()).sum())
    }
}

/// Coin with heads probability `p_heads`; inputs are a single constant zero
/// feature, label 1 is heads and 0 is tails.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoinEnvironment {
    pub p_heads: f64,
}

impl CoinEnvironment {
    pub fn new(p_heads: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p_heads) {
            return Err(Error::domain(format!("coin probability {p_heads} outside [0, 1]")));
        }
        Ok(CoinEnvironment { p_heads })
    }

    pub fn class_probs(&self, inputs: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(inputs.nrows(), 2, |_, c| if c == 1 { self.p_heads } else { 1.0 - self.p_heads })
    }

    pub fn sample_data(&self, n: usize, seed: u64) -> Result<Dataset> {
        if n == 0 {
            return Err(Error::usage("sample size must be at least 1"));
        }
        let mut rng = rng_from_seed(seed);
        let labels = (0..n).map(|_| usize::from(rng.random_bool(self.p_heads))).collect();
        Dataset::new(DMatrix::zeros(n, 1), labels)
    }

    pub fn log_likelihood(&self, sample: &TauSample) -> Result<f64> {
        sample.check_labels(2)?;
        Ok(sample
            .labels
            .iter()
            .map(|&y| if y == 1 { self.p_heads.ln() } else { (1.0 - self.p_heads).ln() })
            .sum())
    }
}

/// Log-likelihoods of `tau` consecutive tails under the two reference agents:
/// one believing the coin is fair-ish with `p = 2/3` and flips are pure chance,
/// the other believing the coin always lands tails (weight 1/3) or always
/// heads (weight 2/3). Returns `(tau * ln(1/3), ln(1/3))`.
pub fn coin_agent_likelihoods(tau: usize) -> Result<(f64, f64)> {
    if tau == 0 {
        return Err(Error::usage("tau must be at least 1"));
    }
    let tails_chance = (1.0f64 / 3.0).ln();
    let aleatoric = tau as f64 * tails_chance;
    // mixture: 1/3 * 1^tau + 2/3 * 0^tau
    let epistemic = (1.0f64 / 3.0).ln();
    Ok((aleatoric, epistemic))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_env(k: usize) -> Environment {
        Environment {
            params: MlpParams::new(vec![Layer::zeros(2, 3), Layer::zeros(3, k)]).unwrap(),
            temperature: 0.1,
            input_dim: 2,
        }
    }

    fn sample_variance(xs: &[f64]) -> f64 {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    }

    #[test]
    fn same_seed_same_environment() {
        let cfg = GenerativeConfig::default();
        assert_eq!(sample_environment(&cfg, 5).unwrap(), sample_environment(&cfg, 5).unwrap());
        assert_ne!(sample_environment(&cfg, 5).unwrap(), sample_environment(&cfg, 6).unwrap());
    }

    #[test]
    fn first_layer_bias_variance() {
        let cfg = GenerativeConfig::default();
        let biases: Vec<f64> = (0..200)
            .flat_map(|s| sample_environment(&cfg, s).unwrap().params.layers[0].bias.as_slice().to_vec())
            .collect();
        assert_eq!(biases.len(), 10_000);
        let v = sample_variance(&biases);
        assert!((0.45..=0.55).contains(&v), "variance {v}");
        let later: Vec<f64> = sample_environment(&cfg, 1).unwrap().params.layers[1].bias.as_slice().to_vec();
        assert!(later.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn xavier_weight_variance() {
        let cfg = GenerativeConfig::default();
        let w: Vec<f64> = (0..100)
            .flat_map(|s| sample_environment(&cfg, s).unwrap().params.layers[0].weights.as_slice().to_vec())
            .collect();
        assert_eq!(w.len(), 10_000);
        let target = 2.0 / 52.0;
        let v = sample_variance(&w);
        assert!((v - target).abs() <= 0.1 * target, "variance {v} vs {target}");

        let uniform = GenerativeConfig {
            init: XavierInit::Uniform,
            ..Default::default()
        };
        let w: Vec<f64> = (0..100)
            .flat_map(|s| sample_environment(&uniform, s).unwrap().params.layers[0].weights.as_slice().to_vec())
            .collect();
        let v = sample_variance(&w);
        assert!((v - target).abs() <= 0.1 * target, "uniform variance {v}");
    }

    #[test]
    fn zero_environment_is_uniform() {
        let env = zero_env(3);
        let p = env.class_probs(&DMatrix::from_row_slice(2, 2, &[1.0, 5.0, -3.0, 0.2])).unwrap();
        assert!(p.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn halving_temperature_doubles_logits() {
        let env = sample_environment(&GenerativeConfig::with_temperature(0.5), 3).unwrap();
        let x = DMatrix::from_row_slice(3, 2, &[0.1, 0.2, -1.0, 0.5, 2.0, -2.0]);
        let mut cooler = env.clone();
        cooler.temperature = 0.25;
        let expected = nncore::softmax_rows(&(env.logits(&x).unwrap() * 2.0), 0.5).unwrap();
        let got = cooler.class_probs(&x).unwrap();
        assert!((expected - got).abs().max() < 1e-15);
    }

    #[test]
    fn hand_computed_single_hidden_unit() {
        // h = relu(2x1 - x2 + 0.5); logits = (h, -h); temperature 0.5
        let env = Environment {
            params: MlpParams::new(vec![
                Layer {
                    weights: DMatrix::from_row_slice(2, 1, &[2.0, -1.0]),
                    bias: DVector::from_vec(vec![0.5]),
                },
                Layer {
                    weights: DMatrix::from_row_slice(1, 2, &[1.0, -1.0]),
                    bias: DVector::zeros(2),
                },
            ])
            .unwrap(),
            temperature: 0.5,
            input_dim: 2,
        };
        // x = (0.25, 0.5): h = 0.5, scaled logits (1, -1), p0 = 1 / (1 + e^-2)
        let p = env.class_probs(&DMatrix::from_row_slice(1, 2, &[0.25, 0.5])).unwrap();
        assert!((p[(0, 0)] - 0.880_797_077_977_882_3).abs() < 1e-15);
        assert!((p[(0, 1)] - 0.119_202_922_022_117_6).abs() < 1e-15);
    }

    #[test]
    fn class_probs_rows_sum_to_one() {
        for (seed, beta) in [(0, 0.01), (1, 0.1), (2, 0.5)] {
            let cfg = GenerativeConfig {
                num_classes: 10,
                input_dim: 3,
                temperature: beta,
                ..Default::default()
            };
            let env = sample_environment(&cfg, seed).unwrap();
            let data = env.sample_data(200, seed).unwrap();
            let p = env.class_probs(&data.inputs).unwrap();
            for r in 0..p.nrows() {
                let total: f64 = p.row(r).iter().sum();
                assert!((total - 1.0).abs() < 1e-12);
                assert!(p.row(r).iter().all(|&v| v > 0.0));
            }
        }
    }

    #[test]
    fn uniform_labels_concentrate() {
        let data = zero_env(2).sample_data(10_000, 3).unwrap();
        let zeros = data.labels.iter().filter(|&&y| y == 0).count() as f64 / 10_000.0;
        assert!((0.49..=0.51).contains(&zeros), "{zeros}");
    }

    #[test]
    fn label_frequencies_match_class_probs() {
        // fixed input repeated: chi-square goodness of fit with 2 dof
        let env = sample_environment(
            &GenerativeConfig {
                num_classes: 3,
                temperature: 0.5,
                ..Default::default()
            },
            8,
        )
        .unwrap();
        let x = DMatrix::from_fn(6000, 2, |_, c| if c == 0 { 0.3 } else { -0.7 });
        let probs = env.class_probs(&x.rows(0, 1).into_owned()).unwrap();
        let mut rng = rng_from_seed(4);
        let mut counts = [0usize; 3];
        for _ in 0..6000 {
            counts[sample_label(probs.row(0).iter().copied(), &mut rng)] += 1;
        }
        let chi2: f64 = (0..3)
            .map(|k| {
                let e = 6000.0 * probs[(0, k)];
                (counts[k] as f64 - e).powi(2) / e
            })
            .sum();
        // 99.9% quantile of chi-square with 2 degrees of freedom
        assert!(chi2 < 13.82, "chi2 = {chi2}");
    }

    #[test]
    fn sample_data_basics() {
        let env = sample_environment(&GenerativeConfig::default(), 1).unwrap();
        let one = env.sample_data(1, 0).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(env.sample_data(50, 9).unwrap(), env.sample_data(50, 9).unwrap());
        assert!(env.sample_data(0, 0).is_err());
    }

    #[test]
    fn environment_log_likelihood() {
        let env = zero_env(2);
        let block = env.sample_data(100, 2).unwrap();
        let ll = env.log_likelihood(&block).unwrap();
        assert!((ll - 100.0 * 0.5f64.ln()).abs() < 1e-12);

        // single factor with probability 0.9: logits (ln 9, 0) at temperature 1
        let env = Environment {
            params: MlpParams::new(vec![Layer {
                weights: DMatrix::zeros(1, 2),
                bias: DVector::from_vec(vec![9f64.ln(), 0.0]),
            }])
            .unwrap(),
            temperature: 1.0,
            input_dim: 1,
        };
        let block = Dataset::new(DMatrix::zeros(1, 1), vec![0]).unwrap();
        assert!((env.log_likelihood(&block).unwrap() - 0.9f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn coin_environment_all_tails() {
        let coin = CoinEnvironment::new(2.0 / 3.0).unwrap();
        for tau in [1usize, 5, 100] {
            let block = Dataset::new(DMatrix::zeros(tau, 1), vec![0; tau]).unwrap();
            let expected = tau as f64 * (1.0f64 / 3.0).ln();
            assert!((coin.log_likelihood(&block).unwrap() - expected).abs() < 1e-12);
        }
        assert!(CoinEnvironment::new(1.5).is_err());
    }

    #[test]
    fn coin_agents() {
        let third = (1.0f64 / 3.0).ln();
        assert_eq!(coin_agent_likelihoods(1).unwrap(), (third, third));
        let (a, b) = coin_agent_likelihoods(2).unwrap();
        assert!((a - (1.0f64 / 9.0).ln()).abs() < 1e-15);
        assert_eq!(b, third);
        let (a, b) = coin_agent_likelihoods(100).unwrap();
        assert!((a + 100.0 * 3f64.ln()).abs() < 1e-12);
        assert_eq!(b, third);
        assert!(coin_agent_likelihoods(0).is_err());
    }
}
