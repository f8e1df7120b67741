//! Feed-forward network substrate shared by the generative process and every
//! trainable agent: parameters, forward pass, softmax, weighted cross-entropy
//! with analytic gradients, and an Adam training loop.

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::Rng;
use rand_distr::{Bernoulli, Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::seeding::{derive_rng, stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
        }
    }

    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// One affine layer; `weights` is `fan_in × fan_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl Layer {
    pub fn fan_in(&self) -> usize {
        self.weights.nrows()
    }

    pub fn fan_out(&self) -> usize {
        self.weights.ncols()
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Layer {
            weights: DMatrix::zeros(fan_in, fan_out),
            bias: DVector::zeros(fan_out),
        }
    }
}

/// Xavier (Glorot) weight law, zero mean with variance `2 / (fan_in + fan_out)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum XavierInit {
    #[default]
    Normal,
    Uniform,
}

impl XavierInit {
    pub fn sample_weights<R: Rng + ?Sized>(self, fan_in: usize, fan_out: usize, rng: &mut R) -> DMatrix<f64> {
        let var = 2.0 / (fan_in + fan_out) as f64;
        match self {
            XavierInit::Normal => {
                let law = Normal::new(0.0, var.sqrt()).expect("finite variance");
                DMatrix::from_fn(fan_in, fan_out, |_, _| law.sample(rng))
            }
            XavierInit::Uniform => {
                let limit = (3.0 * var).sqrt();
                let law = Uniform::new_inclusive(-limit, limit).expect("finite limit");
                DMatrix::from_fn(fan_in, fan_out, |_, _| law.sample(rng))
            }
        }
    }
}

/// Multilayer perceptron: hidden layers use `activations[i]`, the final layer
/// is linear and produces logits.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub layers: Vec<Layer>,
    pub activations: Vec<Activation>,
}

impl MlpParams {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::shape("a network needs at least one layer"));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].fan_out() != pair[1].fan_in() {
                return Err(Error::shape(format!(
                    "layer {i} has fan_out {} but layer {} has fan_in {}",
                    pair[0].fan_out(),
                    i + 1,
                    pair[1].fan_in()
                )));
            }
        }
        for (i, layer) in layers.iter().enumerate() {
            if layer.bias.len() != layer.fan_out() {
                return Err(Error::shape(format!("layer {i} bias length does not match fan_out")));
            }
            if layer.weights.iter().chain(layer.bias.iter()).any(|v| !v.is_finite()) {
                return Err(Error::domain(format!("layer {i} has non-finite parameters")));
            }
        }
        let activations = vec![Activation::Relu; layers.len() - 1];
        Ok(MlpParams { layers, activations })
    }

    /// Xavier-initialised weights and zero biases for the layer widths `dims`
    /// (input, hidden..., output).
    pub fn xavier<R: Rng + ?Sized>(dims: &[usize], init: XavierInit, rng: &mut R) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::shape(format!("invalid layer widths {dims:?}")));
        }
        let layers = dims
            .windows(2)
            .map(|w| Layer {
                weights: init.sample_weights(w[0], w[1], rng),
                bias: DVector::zeros(w[1]),
            })
            .collect();
        MlpParams::new(layers)
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("nonempty").fan_out()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        MlpParams {
            layers: self.layers.iter().map(|l| Layer::zeros(l.fan_in(), l.fan_out())).collect(),
            activations: self.activations.clone(),
        }
    }

    /// Sum of squared weights, biases excluded.
    pub fn weight_sq_norm(&self) -> f64 {
        self.layers.iter().map(|l| l.weights.norm_squared()).sum()
    }

    pub fn param_slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weights.as_slice(), l.bias.as_slice()])
            .collect()
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weights.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.param_slices().concat()
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_params(), "flat parameter length");
        let mut offset = 0;
        for slice in self.param_slices_mut() {
            let n = slice.len();
            slice.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
    }

    fn check_input(&self, inputs: &DMatrix<f64>) -> Result<()> {
        if inputs.ncols() != self.input_dim() {
            return Err(Error::shape(format!(
                "input width {} but network expects {}",
                inputs.ncols(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Logits, `B × K`.
    pub fn forward(&self, inputs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_input(inputs)?;
        Ok(self.forward_unchecked(inputs, None))
    }

    /// Activations of the last hidden layer, `B × width`. For a network with
    /// no hidden layer these are the inputs themselves.
    pub fn features(&self, inputs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_input(inputs)?;
        let mut act = inputs.clone();
        for (layer, &activation) in self.layers.iter().zip(&self.activations) {
            act = affine(&act, layer);
            act.apply(|v| *v = activation.apply(*v));
        }
        Ok(act)
    }

    /// Forward pass with one multiplicative mask per hidden layer. A mask is a
    /// row vector shared by every input row (already scaled for inverted dropout).
    pub fn forward_masked(&self, inputs: &DMatrix<f64>, masks: &[DVector<f64>]) -> Result<DMatrix<f64>> {
        self.check_input(inputs)?;
        if masks.len() != self.activations.len() {
            return Err(Error::shape("one mask per hidden layer is required"));
        }
        Ok(self.forward_unchecked(inputs, Some(masks)))
    }

    fn forward_unchecked(&self, inputs: &DMatrix<f64>, masks: Option<&[DVector<f64>]>) -> DMatrix<f64> {
        let mut act = affine(inputs, &self.layers[0]);
        for (i, layer) in self.layers.iter().enumerate().skip(1) {
            let activation = self.activations[i - 1];
            act.apply(|v| *v = activation.apply(*v));
            if let Some(masks) = masks {
                let mask = &masks[i - 1];
                for (j, mut col) in act.column_iter_mut().enumerate() {
                    col *= mask[j];
                }
            }
            act = affine(&act, layer);
        }
        act
    }
}

fn affine(inputs: &DMatrix<f64>, layer: &Layer) -> DMatrix<f64> {
    let mut out = inputs * &layer.weights;
    for (j, mut col) in out.column_iter_mut().enumerate() {
        col.add_scalar_mut(layer.bias[j]);
    }
    out
}

/// Temperature-scaled softmax of one logit row, computed with max subtraction.
pub fn softmax(logits: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0) {
        return Err(Error::domain(format!("temperature must be positive, got {temperature}")));
    }
    Ok(softmax_unchecked(logits.iter().map(|&x| x / temperature)))
}

fn softmax_unchecked(scaled: impl Iterator<Item = f64> + Clone) -> Vec<f64> {
    let max = scaled.clone().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.map(|x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    // Floor at the smallest normal so no class underflows to an exact zero.
    exps.into_iter().map(|e| (e / total).max(f64::MIN_POSITIVE)).collect()
}

/// Row-wise softmax of a logit matrix.
pub fn softmax_rows(logits: &DMatrix<f64>, temperature: f64) -> Result<DMatrix<f64>> {
    if !(temperature > 0.0) {
        return Err(Error::domain(format!("temperature must be positive, got {temperature}")));
    }
    let mut out = DMatrix::zeros(logits.nrows(), logits.ncols());
    for r in 0..logits.nrows() {
        let row = softmax_unchecked(logits.row(r).iter().map(|&x| x / temperature));
        for (c, p) in row.into_iter().enumerate() {
            out[(r, c)] = p;
        }
    }
    Ok(out)
}

fn log_sum_exp_row(logits: &DMatrix<f64>, r: usize) -> f64 {
    let max = logits.row(r).iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.row(r).iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Coefficient of the summed squared weights added to the loss.
    pub l2_decay_scale: f64,
    pub learning_rate: f64,
    pub num_steps: usize,
    pub batch_size: usize,
    /// Per-example loss weights (bootstrap), aligned with the training set.
    pub per_example_weights: Option<Vec<f64>>,
    pub seed: u64,
    pub adam: AdamConfig,
}

pub const DEFAULT_NUM_STEPS: usize = 1000;
pub const DEFAULT_LEARNING_RATE: f64 = 1e-3;

/// Full batch up to this many examples, minibatches of 128 beyond.
pub fn default_batch_size(num_examples: usize) -> usize {
    if num_examples <= 256 {
        num_examples.max(1)
    } else {
        128
    }
}

impl TrainConfig {
    pub fn for_dataset_size(num_examples: usize, seed: u64) -> Self {
        TrainConfig {
            l2_decay_scale: 0.0,
            learning_rate: DEFAULT_LEARNING_RATE,
            num_steps: DEFAULT_NUM_STEPS,
            batch_size: default_batch_size(num_examples),
            per_example_weights: None,
            seed,
            adam: AdamConfig::default(),
        }
    }

    pub fn validate(&self, num_examples: usize) -> Result<()> {
        if self.num_steps == 0 {
            return Err(Error::usage("num_steps must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::usage("batch_size must be at least 1"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::domain("learning_rate must be finite and nonnegative"));
        }
        if !(self.l2_decay_scale >= 0.0 && self.l2_decay_scale.is_finite()) {
            return Err(Error::domain("l2_decay_scale must be finite and nonnegative"));
        }
        if let Some(w) = &self.per_example_weights {
            if w.len() != num_examples {
                return Err(Error::shape(format!(
                    "{} example weights for {num_examples} examples",
                    w.len()
                )));
            }
            if w.iter().any(|&x| !(x >= 0.0 && x.is_finite())) {
                return Err(Error::domain("example weights must be finite and nonnegative"));
            }
        }
        Ok(())
    }
}

/// Extra ingredients of the training objective beyond plain cross-entropy.
#[derive(Debug, Clone, Copy, Default)]
pub struct TrainOptions<'a> {
    /// Fixed logits added to the network output for every training row.
    pub logit_offset: Option<&'a DMatrix<f64>>,
    /// Probability of zeroing each hidden unit, independently per example.
    pub dropout_rate: f64,
}

struct Objective<'a> {
    inputs: &'a DMatrix<f64>,
    labels: &'a [usize],
    weights: Option<&'a [f64]>,
    logit_offset: Option<&'a DMatrix<f64>>,
    /// One `B × width` matrix per hidden layer.
    masks: Option<&'a [DMatrix<f64>]>,
}

/// Weighted mean cross-entropy (sum of weighted losses over batch size) and
/// its gradient.
fn cross_entropy_and_grad(params: &MlpParams, obj: &Objective<'_>) -> (f64, MlpParams) {
    let batch = obj.inputs.nrows();
    let mut pre = Vec::with_capacity(params.layers.len());
    let mut acts = Vec::with_capacity(params.layers.len());
    acts.push(obj.inputs.clone());
    for (i, layer) in params.layers.iter().enumerate() {
        let z = affine(&acts[i], layer);
        if i + 1 < params.layers.len() {
            let activation = params.activations[i];
            let mut a = z.map(|v| activation.apply(v));
            if let Some(masks) = obj.masks {
                a.component_mul_assign(&masks[i]);
            }
            pre.push(z);
            acts.push(a);
        } else {
            pre.push(z);
        }
    }
    let mut logits = pre.pop().expect("output layer");
    if let Some(offset) = obj.logit_offset {
        logits += offset;
    }

    let k = logits.ncols();
    let mut loss = 0.0;
    let mut delta = DMatrix::zeros(batch, k);
    for r in 0..batch {
        let w = obj.weights.map_or(1.0, |w| w[r]);
        let lse = log_sum_exp_row(&logits, r);
        let y = obj.labels[r];
        loss += w * (lse - logits[(r, y)]);
        for c in 0..k {
            let p = (logits[(r, c)] - lse).exp();
            let target = if c == y { 1.0 } else { 0.0 };
            delta[(r, c)] = w * (p - target) / batch as f64;
        }
    }
    loss /= batch as f64;

    let mut grads = params.zeros_like();
    for i in (0..params.layers.len()).rev() {
        let a = &acts[i];
        grads.layers[i].weights = a.transpose() * &delta;
        grads.layers[i].bias = DVector::from_iterator(delta.ncols(), delta.column_iter().map(|c| c.sum()));
        if i > 0 {
            let mut back = &delta * params.layers[i].weights.transpose();
            let activation = params.activations[i - 1];
            back.zip_apply(&pre[i - 1], |d, z| *d *= activation.derivative(z));
            if let Some(masks) = obj.masks {
                back.component_mul_assign(&masks[i - 1]);
            }
            delta = back;
        }
    }
    (loss, grads)
}

fn add_weight_decay(params: &MlpParams, grads: &mut MlpParams, decay: f64) -> f64 {
    if decay == 0.0 {
        return 0.0;
    }
    for (g, p) in grads.layers.iter_mut().zip(&params.layers) {
        g.weights += &p.weights * (2.0 * decay);
    }
    decay * params.weight_sq_norm()
}

fn check_batch(params: &MlpParams, inputs: &DMatrix<f64>, labels: &[usize]) -> Result<()> {
    params.check_input(inputs)?;
    if inputs.nrows() != labels.len() {
        return Err(Error::shape(format!("{} rows but {} labels", inputs.nrows(), labels.len())));
    }
    let k = params.output_dim();
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::domain(format!("label {bad} outside [0, {k})")));
    }
    Ok(())
}

/// Loss `weighted mean cross-entropy + l2_decay_scale * sum ||W||^2` and its
/// gradient with respect to every parameter.
pub fn loss_and_grad(
    params: &MlpParams,
    inputs: &DMatrix<f64>,
    labels: &[usize],
    config: &TrainConfig,
) -> Result<(f64, MlpParams)> {
    check_batch(params, inputs, labels)?;
    if let Some(w) = &config.per_example_weights {
        if w.len() != labels.len() {
            return Err(Error::shape("example weights are not aligned with the batch"));
        }
    }
    let obj = Objective {
        inputs,
        labels,
        weights: config.per_example_weights.as_deref(),
        logit_offset: None,
        masks: None,
    };
    let (ce, mut grads) = cross_entropy_and_grad(params, &obj);
    let penalty = add_weight_decay(params, &mut grads, config.l2_decay_scale);
    Ok((ce + penalty, grads))
}

/// Mean cross-entropy of `params` on a whole dataset.
pub fn mean_cross_entropy(params: &MlpParams, dataset: &Dataset) -> Result<f64> {
    check_batch(params, &dataset.inputs, &dataset.labels)?;
    let logits = params.forward_unchecked(&dataset.inputs, None);
    let total: f64 = (0..dataset.len())
        .map(|r| log_sum_exp_row(&logits, r) - logits[(r, dataset.labels[r])])
        .sum();
    Ok(total / dataset.len() as f64)
}

pub(crate) struct Adam {
    config: AdamConfig,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step: i32,
}

impl Adam {
    pub(crate) fn new(params: &MlpParams, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = params.param_slices().iter().map(|s| vec![0.0; s.len()]).collect();
        Adam {
            config,
            first: zeros.clone(),
            second: zeros,
            step: 0,
        }
    }

    pub(crate) fn update(&mut self, params: &mut MlpParams, grads: &MlpParams, learning_rate: f64) {
        self.step += 1;
        let AdamConfig { beta1, beta2, epsilon } = self.config;
        let c1 = 1.0 - beta1.powi(self.step);
        let c2 = 1.0 - beta2.powi(self.step);
        for (((p, g), m), v) in params
            .param_slices_mut()
            .into_iter()
            .zip(grads.param_slices())
            .zip(self.first.iter_mut())
            .zip(self.second.iter_mut())
        {
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
    }
}

/// Row indices of the next minibatch; `None` means the full dataset.
pub(crate) fn minibatch_indices<R: Rng + ?Sized>(n: usize, batch_size: usize, rng: &mut R) -> Option<Vec<usize>> {
    if batch_size >= n {
        None
    } else {
        Some(index::sample(rng, n, batch_size).into_vec())
    }
}

fn select_rows(m: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), m.ncols(), |r, c| m[(rows[r], c)])
}

/// Minimise the regularised cross-entropy with Adam.
pub fn train(params: &MlpParams, dataset: &Dataset, config: &TrainConfig) -> Result<MlpParams> {
    train_with(params, dataset, config, TrainOptions::default())
}

pub fn train_with(
    params: &MlpParams,
    dataset: &Dataset,
    config: &TrainConfig,
    options: TrainOptions<'_>,
) -> Result<MlpParams> {
    if dataset.is_empty() {
        return Err(Error::usage("cannot train on an empty dataset"));
    }
    config.validate(dataset.len())?;
    check_batch(params, &dataset.inputs, &dataset.labels)?;
    if let Some(offset) = options.logit_offset {
        if offset.shape() != (dataset.len(), params.output_dim()) {
            return Err(Error::shape("logit offset must be one row of K logits per example"));
        }
    }
    if !(0.0..1.0).contains(&options.dropout_rate) {
        return Err(Error::domain(format!("dropout rate {} outside [0, 1)", options.dropout_rate)));
    }

    let n = dataset.len();
    let mut batch_rng = derive_rng(config.seed, &[stream::BATCHES]);
    let mut dropout_rng = derive_rng(config.seed, &[stream::DROPOUT]);
    let keep = Bernoulli::new(1.0 - options.dropout_rate).expect("valid keep probability");
    let scale = 1.0 / (1.0 - options.dropout_rate);
    let hidden_widths: Vec<usize> = params.layers[..params.layers.len() - 1].iter().map(Layer::fan_out).collect();

    let mut current = params.clone();
    let mut adam = Adam::new(&current, config.adam);
    for _ in 0..config.num_steps {
        let rows = minibatch_indices(n, config.batch_size, &mut batch_rng);
        let (inputs, labels, weights, offset);
        let (inputs_ref, labels_ref, weights_ref, offset_ref) = match &rows {
            None => (
                &dataset.inputs,
                dataset.labels.as_slice(),
                config.per_example_weights.as_deref(),
                options.logit_offset,
            ),
            Some(rows) => {
                inputs = select_rows(&dataset.inputs, rows);
                labels = rows.iter().map(|&i| dataset.labels[i]).collect::<Vec<_>>();
                weights = config
                    .per_example_weights
                    .as_ref()
                    .map(|w| rows.iter().map(|&i| w[i]).collect::<Vec<_>>());
                offset = options.logit_offset.map(|o| select_rows(o, rows));
                (&inputs, labels.as_slice(), weights.as_deref(), offset.as_ref())
            }
        };
        let masks: Option<Vec<DMatrix<f64>>> = (options.dropout_rate > 0.0).then(|| {
            hidden_widths
                .iter()
                .map(|&w| {
                    DMatrix::from_fn(inputs_ref.nrows(), w, |_, _| {
                        if keep.sample(&mut dropout_rng) {
                            scale
                        } else {
                            0.0
                        }
                    })
                })
                .collect()
        });
        let obj = Objective {
            inputs: inputs_ref,
            labels: labels_ref,
            weights: weights_ref,
            logit_offset: offset_ref,
            masks: masks.as_deref(),
        };
        let (_, mut grads) = cross_entropy_and_grad(&current, &obj);
        add_weight_decay(&current, &mut grads, config.l2_decay_scale);
        adam.update(&mut current, &grads, config.learning_rate);
    }
    if current.layers.iter().any(|l| l.weights.iter().chain(l.bias.iter()).any(|v| !v.is_finite())) {
        return Err(Error::domain("training diverged to non-finite parameters"));
    }
    Ok(current)
}

/// Gradient of the unregularised weighted mean cross-entropy, for samplers
/// that supply their own prior term.
pub(crate) fn data_gradient(
    params: &MlpParams,
    inputs: &DMatrix<f64>,
    labels: &[usize],
    logit_offset: Option<&DMatrix<f64>>,
) -> (f64, MlpParams) {
    let obj = Objective {
        inputs,
        labels,
        weights: None,
        logit_offset,
        masks: None,
    };
    cross_entropy_and_grad(params, &obj)
}

pub(crate) fn rows_of(m: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    select_rows(m, rows)
}
