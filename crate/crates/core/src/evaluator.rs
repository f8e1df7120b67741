//! The testbed loop: sample problems, train agents, estimate `d_KL^tau`.

use std::collections::BTreeSet;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agents::{self, AgentSpec, ConstantMixtureSampler, EnvMeta, PosteriorSampler};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::generative::{sample_environment, CoinEnvironment, Environment, GenerativeConfig};
use crate::likelihood::{mc_log_likelihood, partition_log_likelihood, PartitionConfig, ProbMatrix};
use crate::seeding::{derive_rng, derive_seed, stream};

/// Blocks with `tau` below this use the Monte Carlo estimator, the rest the
/// random-partition estimator.
pub const DEFAULT_MC_THRESHOLD: usize = 10;
pub const DEFAULT_REAL_HYPERPLANES: usize = 10;

/// A data-generating process with an exactly computable likelihood.
pub trait Problem: Send + Sync {
    fn input_dim(&self) -> usize;
    fn num_classes(&self) -> usize;
    fn temperature(&self) -> f64;
    fn sample_data(&self, n: usize, seed: u64) -> Result<Dataset>;
    fn log_likelihood(&self, sample: &Dataset) -> Result<f64>;
    fn class_probs(&self, inputs: &DMatrix<f64>) -> Result<DMatrix<f64>>;
}

impl Problem for Environment {
    fn input_dim(&self) -> usize {
        self.input_dim
    }
    fn num_classes(&self) -> usize {
        Environment::num_classes(self)
    }
    fn temperature(&self) -> f64 {
        self.temperature
    }
    fn sample_data(&self, n: usize, seed: u64) -> Result<Dataset> {
        Environment::sample_data(self, n, seed)
    }
    fn log_likelihood(&self, sample: &Dataset) -> Result<f64> {
        Environment::log_likelihood(self, sample)
    }
    fn class_probs(&self, inputs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Environment::class_probs(self, inputs)
    }
}

impl Problem for CoinEnvironment {
    fn input_dim(&self) -> usize {
        1
    }
    fn num_classes(&self) -> usize {
        2
    }
    fn temperature(&self) -> f64 {
        1.0
    }
    fn sample_data(&self, n: usize, seed: u64) -> Result<Dataset> {
        CoinEnvironment::sample_data(self, n, seed)
    }
    fn log_likelihood(&self, sample: &Dataset) -> Result<f64> {
        CoinEnvironment::log_likelihood(self, sample)
    }
    fn class_probs(&self, inputs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(CoinEnvironment::class_probs(self, inputs))
    }
}

/// Distribution over problems.
pub trait ProblemPrior: Send + Sync {
    fn sample(&self, seed: u64) -> Result<Arc<dyn Problem>>;
}

impl ProblemPrior for GenerativeConfig {
    fn sample(&self, seed: u64) -> Result<Arc<dyn Problem>> {
        Ok(Arc::new(sample_environment(self, seed)?))
    }
}

/// Coins with heads probability `p` drawn from a finite prior of
/// `(weight, p)` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct CoinPrior {
    pub components: Vec<(f64, f64)>,
}

impl CoinPrior {
    /// Always tails with weight 1/3, always heads with weight 2/3.
    pub fn reference() -> Self {
        CoinPrior {
            components: vec![(1.0 / 3.0, 0.0), (2.0 / 3.0, 1.0)],
        }
    }
}

impl ProblemPrior for CoinPrior {
    fn sample(&self, seed: u64) -> Result<Arc<dyn Problem>> {
        let weights = self.components.iter().map(|c| c.0);
        let total: f64 = self.components.iter().map(|c| c.0).sum();
        let pick = crate::generative::sample_label(weights.map(|w| w / total), &mut derive_rng(seed, &[]));
        Ok(Arc::new(CoinEnvironment::new(self.components[pick].1)?))
    }
}

/// Produces a trained agent for one problem.
pub trait AgentFactory: Send + Sync {
    fn id(&self) -> String;
    /// Mixed into the agent stream; agents sharing it see the same training
    /// randomness on every problem.
    fn seed(&self) -> u64 {
        0
    }
    fn train(&self, problem: &Arc<dyn Problem>, data: &Dataset, meta: &EnvMeta, seed: u64) -> Result<Box<dyn PosteriorSampler>>;
}

impl AgentFactory for AgentSpec {
    fn id(&self) -> String {
        self.name()
    }

    fn seed(&self) -> u64 {
        self.seed
    }

    fn train(&self, _problem: &Arc<dyn Problem>, data: &Dataset, meta: &EnvMeta, seed: u64) -> Result<Box<dyn PosteriorSampler>> {
        agents::train_agent_with_seed(self, data, meta, seed)
    }
}

/// Single-model belief equal to the true problem.
pub struct PerfectAgent;

struct ProblemSampler(Arc<dyn Problem>);

impl PosteriorSampler for ProblemSampler {
    fn input_dim(&self) -> usize {
        self.0.input_dim()
    }
    fn num_classes(&self) -> usize {
        self.0.num_classes()
    }
    fn model_probs(&self, inputs: &DMatrix<f64>, _seed: u64, _index: usize) -> Result<DMatrix<f64>> {
        self.0.class_probs(inputs)
    }
}

impl AgentFactory for PerfectAgent {
    fn id(&self) -> String {
        "perfect".to_string()
    }

    fn train(&self, problem: &Arc<dyn Problem>, _data: &Dataset, _meta: &EnvMeta, _seed: u64) -> Result<Box<dyn PosteriorSampler>> {
        Ok(Box::new(ProblemSampler(problem.clone())))
    }
}

/// Agent that ignores its data and always holds the same belief.
pub struct FixedAgent {
    pub name: String,
    pub belief: ConstantMixtureSampler,
}

impl AgentFactory for FixedAgent {
    fn id(&self) -> String {
        self.name.clone()
    }

    fn train(&self, _problem: &Arc<dyn Problem>, _data: &Dataset, _meta: &EnvMeta, _seed: u64) -> Result<Box<dyn PosteriorSampler>> {
        Ok(Box::new(self.belief.clone()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub agent: String,
    /// `None` on aggregate rows and real-data rows.
    pub beta: Option<f64>,
    /// `None` on aggregate rows.
    pub train_size: Option<usize>,
    pub tau: usize,
    /// `d_KL^tau` estimate on the testbed, mean NLL on real data.
    pub kl_or_nll: f64,
    pub stderr: f64,
    pub count: usize,
    pub seconds: f64,
    pub seed: u64,
    /// Failure message of a cell that could not be evaluated.
    pub error: Option<String>,
}

impl EvalRecord {
    pub fn failed(&self) -> bool {
        self.error.is_some()
    }
}

/// Mean and standard error; both infinite if any value is.
fn mean_and_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.iter().any(|v| !v.is_finite()) {
        let mean = values.iter().sum::<f64>() / n;
        return (mean, f64::INFINITY);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Settings shared by all blocks of a cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellConfig {
    pub train_size: usize,
    pub num_problems: usize,
    pub num_test_samples: usize,
    pub num_models: usize,
    pub num_hyperplanes: usize,
    pub mc_threshold: usize,
    pub seed: u64,
}

impl CellConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errors = Vec::new();
        for (name, v) in [
            ("train_size", self.train_size),
            ("num_problems", self.num_problems),
            ("num_test_samples", self.num_test_samples),
            ("num_models", self.num_models),
        ] {
            if v == 0 {
                errors.push(format!("{name} must be at least 1"));
            }
        }
        if self.num_hyperplanes > 64 {
            errors.push("num_hyperplanes must be at most 64".to_string());
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errors))
        }
    }
}

/// Joint log-likelihood estimate of `labels` under `probs`.
pub fn estimate_log_likelihood(probs: &ProbMatrix, labels: &[usize], num_hyperplanes: usize, mc_threshold: usize, seed: u64) -> Result<f64> {
    if labels.len() < mc_threshold {
        mc_log_likelihood(probs, labels)
    } else {
        partition_log_likelihood(probs, labels, &PartitionConfig::new(num_hyperplanes, seed))
    }
}

/// Evaluate one agent at several `tau` on the same `J` problems and trained
/// agents. Returns one record per `tau`, in the order given.
pub fn run_cell_taus(
    agent: &dyn AgentFactory,
    prior: &dyn ProblemPrior,
    taus: &[usize],
    config: &CellConfig,
) -> Result<Vec<EvalRecord>> {
    config.validate()?;
    if taus.is_empty() || taus.contains(&0) {
        return Err(Error::usage("tau values must be at least 1"));
    }
    let agent_id = agent.id();
    let start = Instant::now();
    let s = config.seed;
    let mut diffs: Vec<Vec<f64>> = vec![Vec::with_capacity(config.num_problems * config.num_test_samples); taus.len()];
    let mut beta = None;
    for j in 0..config.num_problems as u64 {
        let problem = prior.sample(derive_seed(s, &[stream::ENVIRONMENT, j]))?;
        beta = Some(problem.temperature());
        let data = problem.sample_data(config.train_size, derive_seed(s, &[stream::TRAIN_DATA, j]))?;
        let meta = EnvMeta {
            input_dim: problem.input_dim(),
            num_classes: problem.num_classes(),
            temperature: problem.temperature(),
            train_size: data.len(),
        };
        // agents differing only in seed are independent; agents sharing a
        // seed share their training randomness
        let agent_seed = derive_seed(s, &[stream::AGENT, j, agent.seed()]);
        let sampler = agent.train(&problem, &data, &meta, agent_seed).map_err(|e| Error::Training {
            problem: j as usize,
            seed: agent_seed,
            source: Box::new(e),
        })?;
        for (slot, &tau) in taus.iter().enumerate() {
            let tau_key = tau as u64;
            for n in 0..config.num_test_samples as u64 {
                let sample = problem.sample_data(tau, derive_seed(s, &[stream::TEST_SAMPLE, tau_key, j, n]))?;
                let log_p = problem.log_likelihood(&sample)?;
                let probs = agents::sample_probs(
                    sampler.as_ref(),
                    &sample.inputs,
                    config.num_models,
                    derive_seed(s, &[stream::MODELS, tau_key, j, n]),
                )?;
                let log_q = estimate_log_likelihood(
                    &probs,
                    &sample.labels,
                    config.num_hyperplanes,
                    config.mc_threshold,
                    derive_seed(s, &[stream::HYPERPLANES, tau_key, j, n]),
                )?;
                diffs[slot].push(if log_q == f64::NEG_INFINITY { f64::INFINITY } else { log_p - log_q });
            }
        }
    }
    let seconds = start.elapsed().as_secs_f64() / taus.len() as f64;
    Ok(taus
        .iter()
        .zip(diffs)
        .map(|(&tau, d)| {
            let (kl, stderr) = mean_and_stderr(&d);
            EvalRecord {
                agent: agent_id.clone(),
                beta,
                train_size: Some(config.train_size),
                tau,
                kl_or_nll: kl,
                stderr,
                count: d.len(),
                seconds,
                seed: config.seed,
                error: None,
            }
        })
        .collect())
}

pub fn run_cell(agent: &dyn AgentFactory, prior: &dyn ProblemPrior, tau: usize, config: &CellConfig) -> Result<EvalRecord> {
    Ok(run_cell_taus(agent, prior, &[tau], config)?.remove(0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub temperatures: Vec<f64>,
    pub train_sizes: Vec<usize>,
    pub taus: Vec<usize>,
    pub num_problems: usize,
    pub num_test_samples: usize,
    pub num_models: usize,
    pub num_hyperplanes: usize,
    pub mc_threshold: usize,
    pub input_dim: usize,
    pub num_classes: usize,
    pub seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            temperatures: vec![0.01, 0.1, 0.5],
            train_sizes: vec![1, 3, 10, 30, 100, 300, 1000],
            taus: vec![1, 100],
            num_problems: 10,
            num_test_samples: 1000,
            num_models: 1000,
            num_hyperplanes: 7,
            mc_threshold: DEFAULT_MC_THRESHOLD,
            input_dim: 2,
            num_classes: 2,
            seed: 0,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errors = Vec::new();
        for (name, empty) in [
            ("temperatures", self.temperatures.is_empty()),
            ("train_sizes", self.train_sizes.is_empty()),
            ("taus", self.taus.is_empty()),
        ] {
            if empty {
                errors.push(format!("{name} must not be empty"));
            }
        }
        if let Some(b) = self.temperatures.iter().find(|b| !(**b > 0.0 && b.is_finite())) {
            errors.push(format!("temperatures: {b} is not a positive number"));
        }
        if self.train_sizes.contains(&0) {
            errors.push("train_sizes: values must be at least 1".to_string());
        }
        if self.taus.contains(&0) {
            errors.push("taus: values must be at least 1".to_string());
        }
        for (name, v) in [
            ("num_problems", self.num_problems),
            ("num_test_samples", self.num_test_samples),
            ("num_models", self.num_models),
            ("input_dim", self.input_dim),
        ] {
            if v == 0 {
                errors.push(format!("{name} must be at least 1"));
            }
        }
        if self.num_classes < 2 {
            errors.push("num_classes must be at least 2".to_string());
        }
        if self.num_hyperplanes > 64 {
            errors.push("num_hyperplanes must be at most 64".to_string());
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errors))
        }
    }

    /// Seed of the `(beta, T)` cell; shared by all agents and all `tau`.
    pub fn cell_seed(&self, beta: f64, train_size: usize) -> u64 {
        derive_seed(self.seed, &[beta.to_bits(), train_size as u64])
    }

    pub fn prior(&self, beta: f64) -> GenerativeConfig {
        GenerativeConfig {
            input_dim: self.input_dim,
            num_classes: self.num_classes,
            temperature: beta,
            ..GenerativeConfig::default()
        }
    }
}

fn sort_records(records: &mut [EvalRecord]) {
    records.sort_by(|a, b| {
        a.agent
            .cmp(&b.agent)
            .then(a.beta.is_none().cmp(&b.beta.is_none()))
            .then(a.beta.unwrap_or(0.0).total_cmp(&b.beta.unwrap_or(0.0)))
            .then(a.train_size.is_none().cmp(&b.train_size.is_none()))
            .then(a.train_size.cmp(&b.train_size))
            .then(a.tau.cmp(&b.tau))
    });
}

/// Mean of the successful cells per `(agent, tau)`.
pub fn aggregate(records: &[EvalRecord]) -> Vec<EvalRecord> {
    let keys: BTreeSet<(String, usize)> = records
        .iter()
        .filter(|r| r.train_size.is_some())
        .map(|r| (r.agent.clone(), r.tau))
        .collect();
    keys.into_iter()
        .map(|(agent, tau)| {
            let cells: Vec<&EvalRecord> = records
                .iter()
                .filter(|r| r.agent == agent && r.tau == tau && r.train_size.is_some())
                .collect();
            let ok: Vec<&&EvalRecord> = cells.iter().filter(|r| !r.failed()).collect();
            let n = ok.len() as f64;
            let failed = cells.len() - ok.len();
            EvalRecord {
                agent,
                beta: None,
                train_size: None,
                tau,
                kl_or_nll: if ok.is_empty() { f64::NAN } else { ok.iter().map(|r| r.kl_or_nll).sum::<f64>() / n },
                stderr: if ok.is_empty() { f64::NAN } else { ok.iter().map(|r| r.stderr.powi(2)).sum::<f64>().sqrt() / n },
                count: ok.iter().map(|r| r.count).sum(),
                seconds: cells.iter().map(|r| r.seconds).sum(),
                seed: cells.first().map_or(0, |r| r.seed),
                error: (failed > 0).then(|| format!("{failed} of {} cells failed", cells.len())),
            }
        })
        .collect()
}

/// Every `(agent, beta, T, tau)` cell plus one aggregate row per
/// `(agent, tau)`, sorted. The output does not depend on the worker count or
/// on the order of `agents`.
pub fn run_sweep(config: &SweepConfig, agents: &[Arc<dyn AgentFactory>], workers: usize) -> Result<Vec<EvalRecord>> {
    config.validate()?;
    if agents.is_empty() {
        return Err(Error::usage("at least one agent is required"));
    }
    let mut ids = BTreeSet::new();
    for a in agents {
        if !ids.insert(a.id()) {
            return Err(Error::usage(format!("duplicate agent id \"{}\"", a.id())));
        }
    }
    let tasks: Vec<(usize, f64, usize)> = (0..agents.len())
        .flat_map(|a| {
            config
                .temperatures
                .iter()
                .flat_map(move |&b| config.train_sizes.iter().map(move |&t| (a, b, t)))
        })
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::usage(format!("cannot start worker pool: {e}")))?;
    let mut records: Vec<EvalRecord> = pool.install(|| {
        tasks
            .par_iter()
            .flat_map_iter(|&(a, beta, t)| {
                let agent = agents[a].as_ref();
                let cell = CellConfig {
                    train_size: t,
                    num_problems: config.num_problems,
                    num_test_samples: config.num_test_samples,
                    num_models: config.num_models,
                    num_hyperplanes: config.num_hyperplanes,
                    mc_threshold: config.mc_threshold,
                    seed: config.cell_seed(beta, t),
                };
                match run_cell_taus(agent, &config.prior(beta), &config.taus, &cell) {
                    Ok(rows) => rows,
                    Err(e) => config
                        .taus
                        .iter()
                        .map(|&tau| EvalRecord {
                            agent: agent.id(),
                            beta: Some(beta),
                            train_size: Some(t),
                            tau,
                            kl_or_nll: f64::NAN,
                            stderr: f64::NAN,
                            count: 0,
                            seconds: 0.0,
                            seed: cell.seed,
                            error: Some(e.to_string()),
                        })
                        .collect(),
                }
            })
            .collect()
    });
    let summary = aggregate(&records);
    records.extend(summary);
    sort_records(&mut records);
    Ok(records)
}

/// How real-data test blocks are formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockScheme {
    /// Each block is `tau` distinct rows drawn uniformly; blocks are independent.
    Random,
    /// Block `n` is rows `n tau, ..., n tau + tau - 1` modulo the test size.
    Coverage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RealEvalConfig {
    pub tau: usize,
    pub num_blocks: usize,
    pub num_models: usize,
    pub num_hyperplanes: usize,
    pub mc_threshold: usize,
    pub scheme: BlockScheme,
    /// Defaults to one more than the largest label seen.
    pub num_classes: Option<usize>,
    pub seed: u64,
}

impl Default for RealEvalConfig {
    fn default() -> Self {
        RealEvalConfig {
            tau: 1,
            num_blocks: 1000,
            num_models: 1000,
            num_hyperplanes: DEFAULT_REAL_HYPERPLANES,
            mc_threshold: DEFAULT_MC_THRESHOLD,
            scheme: BlockScheme::Random,
            num_classes: None,
            seed: 0,
        }
    }
}

/// Row indices of real-data block `n`.
pub fn block_rows(scheme: BlockScheme, test_size: usize, tau: usize, seed: u64, n: usize) -> Vec<usize> {
    match scheme {
        BlockScheme::Random => index::sample(&mut derive_rng(seed, &[stream::TEST_SAMPLE, n as u64]), test_size, tau).into_vec(),
        BlockScheme::Coverage => (0..tau).map(|i| (n * tau + i) % test_size).collect(),
    }
}

/// Mean joint negative log-likelihood of `tau`-blocks of `test` under an agent
/// trained on `train`. Agents see temperature 1.
pub fn evaluate_nll_real(agent: &dyn AgentFactory, train: &Dataset, test: &Dataset, config: &RealEvalConfig) -> Result<EvalRecord> {
    if config.tau == 0 || config.num_blocks == 0 || config.num_models == 0 {
        return Err(Error::usage("tau, num_blocks and num_models must be at least 1"));
    }
    if test.len() < config.tau {
        return Err(Error::usage(format!("test set has {} rows, fewer than tau = {}", test.len(), config.tau)));
    }
    if train.is_empty() {
        return Err(Error::usage("training set is empty"));
    }
    if train.input_dim() != test.input_dim() {
        return Err(Error::shape("train and test sets differ in width"));
    }
    let num_classes = config.num_classes.unwrap_or_else(|| {
        train.labels.iter().chain(&test.labels).copied().max().unwrap_or(0) + 1
    }).max(2);
    test.check_labels(num_classes)?;
    let start = Instant::now();
    let meta = EnvMeta {
        input_dim: train.input_dim(),
        num_classes,
        temperature: 1.0,
        train_size: train.len(),
    };
    let placeholder: Arc<dyn Problem> = Arc::new(EmpiricalProblem { meta });
    let agent_seed = derive_seed(config.seed, &[stream::AGENT, agent.seed()]);
    let sampler = agent.train(&placeholder, train, &meta, agent_seed).map_err(|e| Error::Training {
        problem: 0,
        seed: agent_seed,
        source: Box::new(e),
    })?;
    let nll: Vec<f64> = (0..config.num_blocks)
        .map(|n| {
            let rows = block_rows(config.scheme, test.len(), config.tau, config.seed, n);
            let block = test.select(&rows);
            let key = n as u64;
            let probs = agents::sample_probs(
                sampler.as_ref(),
                &block.inputs,
                config.num_models,
                derive_seed(config.seed, &[stream::MODELS, key]),
            )?;
            let log_q = estimate_log_likelihood(
                &probs,
                &block.labels,
                config.num_hyperplanes,
                config.mc_threshold,
                derive_seed(config.seed, &[stream::HYPERPLANES, key]),
            )?;
            Ok(-log_q)
        })
        .collect::<Result<_>>()?;
    let (mean, stderr) = mean_and_stderr(&nll);
    Ok(EvalRecord {
        agent: agent.id(),
        beta: None,
        train_size: Some(train.len()),
        tau: config.tau,
        kl_or_nll: mean,
        stderr,
        count: nll.len(),
        seconds: start.elapsed().as_secs_f64(),
        seed: config.seed,
        error: None,
    })
}

/// Stand-in problem for real data: only its dimensions are meaningful.
struct EmpiricalProblem {
    meta: EnvMeta,
}

impl Problem for EmpiricalProblem {
    fn input_dim(&self) -> usize {
        self.meta.input_dim
    }
    fn num_classes(&self) -> usize {
        self.meta.num_classes
    }
    fn temperature(&self) -> f64 {
        self.meta.temperature
    }
    fn sample_data(&self, _n: usize, _seed: u64) -> Result<Dataset> {
        Err(Error::usage("real data has no generative process"))
    }
    fn log_likelihood(&self, _sample: &Dataset) -> Result<f64> {
        Err(Error::usage("real data has no generative process"))
    }
    fn class_probs(&self, _inputs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Err(Error::usage("real data has no generative process"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::AgentKind;

    fn coin_agents() -> (FixedAgent, FixedAgent) {
        (
            FixedAgent {
                name: "chance".into(),
                belief: ConstantMixtureSampler::coin(&[(1.0, 2.0 / 3.0)]).unwrap(),
            },
            FixedAgent {
                name: "prior".into(),
                belief: ConstantMixtureSampler::coin(&[(1.0 / 3.0, 0.0), (2.0 / 3.0, 1.0)]).unwrap(),
            },
        )
    }

    fn cell(seed: u64) -> CellConfig {
        CellConfig {
            train_size: 5,
            num_problems: 4,
            num_test_samples: 100,
            num_models: 200,
            num_hyperplanes: 7,
            mc_threshold: DEFAULT_MC_THRESHOLD,
            seed,
        }
    }

    #[test]
    fn perfect_agent_scores_zero() {
        let prior = GenerativeConfig::with_temperature(0.5);
        for tau in [1, 5] {
            let r = run_cell(&PerfectAgent, &prior, tau, &cell(1)).unwrap();
            assert!(r.kl_or_nll.abs() <= 3.0 * r.stderr + 1e-12, "{r:?}");
            assert_eq!(r.count, 400);
        }
    }

    #[test]
    fn coin_agents_tie_on_marginals_and_split_on_joints() {
        let (chance, prior_agent) = coin_agents();
        let prior = CoinPrior::reference();
        let config = CellConfig { num_problems: 30, ..cell(2) };
        let a = run_cell(&chance, &prior, 1, &config).unwrap();
        let b = run_cell(&prior_agent, &prior, 1, &config).unwrap();
        assert!((a.kl_or_nll - b.kl_or_nll).abs() <= 3.0 * (a.stderr.powi(2) + b.stderr.powi(2)).sqrt());
        let a = run_cell(&chance, &prior, 10, &config).unwrap();
        let b = run_cell(&prior_agent, &prior, 10, &config).unwrap();
        assert!(b.kl_or_nll < a.kl_or_nll, "{} vs {}", b.kl_or_nll, a.kl_or_nll);
    }

    #[test]
    fn coin_cell_matches_enumeration() {
        // on a deterministic coin the chance agent loses ln 3 per tails flip and
        // ln(3/2) per heads flip, whatever the sampled blocks
        let (chance, _) = coin_agents();
        let prior = CoinPrior::reference();
        let config = CellConfig { num_problems: 12, ..cell(3) };
        let r = run_cell(&chance, &prior, 4, &config).unwrap();
        let per_flip: Vec<f64> = (0..12)
            .map(|j| {
                let problem = prior.sample(derive_seed(config.seed, &[stream::ENVIRONMENT, j])).unwrap();
                let heads = problem.class_probs(&DMatrix::zeros(1, 1)).unwrap()[(0, 1)];
                if heads == 1.0 { 1.5f64.ln() } else { 3f64.ln() }
            })
            .collect();
        let want = 4.0 * per_flip.iter().sum::<f64>() / 12.0;
        assert!((r.kl_or_nll - want).abs() < 1e-12, "{} vs {want}", r.kl_or_nll);
    }

    #[test]
    fn training_failures_carry_context() {
        let agent = AgentSpec::new(AgentKind::Knn).with("k", 0.0);
        let err = run_cell(&agent, &GenerativeConfig::default(), 1, &cell(0)).unwrap_err();
        assert!(matches!(err, Error::Training { problem: 0, .. }), "{err}");
    }

    #[test]
    fn stderr_shrinks_with_more_blocks() {
        let agent = AgentSpec::new(AgentKind::Knn).with("k", 3.0);
        let prior = GenerativeConfig::with_temperature(0.5);
        let mut ratios = Vec::new();
        for seed in 0..8 {
            let small = CellConfig { num_test_samples: 200, num_problems: 1, num_models: 1, ..cell(seed) };
            let large = CellConfig { num_test_samples: 400, ..small.clone() };
            let a = run_cell(&agent, &prior, 1, &small).unwrap();
            let b = run_cell(&agent, &prior, 1, &large).unwrap();
            ratios.push(b.stderr / a.stderr);
        }
        let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
        assert!((mean * 2f64.sqrt() - 1.0).abs() < 0.2, "{ratios:?}");
    }

    fn small_sweep() -> SweepConfig {
        SweepConfig {
            temperatures: vec![0.1, 0.5],
            train_sizes: vec![3, 8],
            taus: vec![1, 12],
            num_problems: 2,
            num_test_samples: 10,
            num_models: 20,
            ..SweepConfig::default()
        }
    }

    #[test]
    fn sweep_counts_and_aggregates() {
        let agents: Vec<Arc<dyn AgentFactory>> = vec![
            Arc::new(AgentSpec::new(AgentKind::Knn)),
            Arc::new(AgentSpec::new(AgentKind::Knn).with("k", 1.0)),
        ];
        let records = run_sweep(&small_sweep(), &agents, 2).unwrap();
        assert_eq!(records.iter().filter(|r| r.train_size.is_some()).count(), 2 * 2 * 2 * 2);
        let aggregates: Vec<_> = records.iter().filter(|r| r.train_size.is_none()).collect();
        assert_eq!(aggregates.len(), 4);
        for agg in aggregates {
            let cells: Vec<f64> = records
                .iter()
                .filter(|r| r.agent == agg.agent && r.tau == agg.tau && r.train_size.is_some())
                .map(|r| r.kl_or_nll)
                .collect();
            assert_eq!(cells.len(), 4);
            assert!((agg.kl_or_nll - cells.iter().sum::<f64>() / 4.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sweep_is_independent_of_order_and_workers() {
        let a: Arc<dyn AgentFactory> = Arc::new(AgentSpec::new(AgentKind::Knn));
        let b: Arc<dyn AgentFactory> = Arc::new(AgentSpec::new(AgentKind::Mlp).with("steps", 20.0).with("hidden", 4.0));
        let strip = |mut rs: Vec<EvalRecord>| {
            rs.iter_mut().for_each(|r| r.seconds = 0.0);
            rs
        };
        let one = strip(run_sweep(&small_sweep(), &[a.clone(), b.clone()], 1).unwrap());
        let many = strip(run_sweep(&small_sweep(), &[b, a], 4).unwrap());
        assert_eq!(one, many);
    }

    #[test]
    fn failed_cells_are_recorded() {
        let agents: Vec<Arc<dyn AgentFactory>> = vec![Arc::new(AgentSpec::new(AgentKind::Knn).with("k", -1.0))];
        let records = run_sweep(&small_sweep(), &agents, 1).unwrap();
        assert!(records.iter().all(EvalRecord::failed));
        let dup: Vec<Arc<dyn AgentFactory>> = vec![Arc::new(AgentSpec::new(AgentKind::Knn)), Arc::new(AgentSpec::new(AgentKind::Knn))];
        assert!(run_sweep(&small_sweep(), &dup, 1).is_err());
    }

    fn iris_like(n: usize, seed: u64) -> Dataset {
        let env = sample_environment(
            &GenerativeConfig {
                input_dim: 4,
                num_classes: 3,
                ..GenerativeConfig::with_temperature(0.5)
            },
            seed,
        )
        .unwrap();
        env.sample_data(n, seed + 1).unwrap()
    }

    #[test]
    fn uniform_agent_has_log_k_nll() {
        let agent = FixedAgent {
            name: "uniform".into(),
            belief: ConstantMixtureSampler::uniform(4, 3).unwrap(),
        };
        let (train, test) = (iris_like(20, 1), iris_like(30, 2));
        let config = RealEvalConfig { num_blocks: 50, num_models: 10, num_classes: Some(3), ..RealEvalConfig::default() };
        let r = evaluate_nll_real(&agent, &train, &test, &config).unwrap();
        assert!((r.kl_or_nll - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn coverage_blocks_reproduce_mean_cross_entropy() {
        let (train, test) = (iris_like(40, 3), iris_like(30, 4));
        let agent = AgentSpec::new(AgentKind::Mlp).with("steps", 50.0).with("hidden", 8.0);
        let config = RealEvalConfig {
            tau: 1,
            num_blocks: test.len(),
            num_models: 5,
            scheme: BlockScheme::Coverage,
            num_classes: Some(3),
            ..RealEvalConfig::default()
        };
        let r = evaluate_nll_real(&agent, &train, &test, &config).unwrap();
        let meta = EnvMeta { input_dim: 4, num_classes: 3, temperature: 1.0, train_size: 40 };
        let seed = derive_seed(config.seed, &[stream::AGENT, agent.seed]);
        let sampler = agents::train_agent_with_seed(&agent, &train, &meta, seed).unwrap();
        let probs = sampler.model_probs(&test.inputs, 0, 0).unwrap();
        let naive = (0..test.len()).map(|i| -probs[(i, test.labels[i])].ln()).sum::<f64>() / test.len() as f64;
        assert!((r.kl_or_nll - naive).abs() < 1e-9);
    }

    #[test]
    fn random_blocks_have_distinct_rows() {
        for n in 0..20 {
            let rows = block_rows(BlockScheme::Random, 12, 12, 5, n);
            let set: BTreeSet<_> = rows.iter().collect();
            assert_eq!(set.len(), 12);
        }
        assert_eq!(block_rows(BlockScheme::Coverage, 5, 2, 0, 2), vec![4, 0]);
    }

    #[test]
    fn real_eval_rejects_short_test_sets() {
        let (train, test) = (iris_like(10, 1), iris_like(3, 2));
        let config = RealEvalConfig { tau: 4, ..RealEvalConfig::default() };
        let err = evaluate_nll_real(&AgentSpec::new(AgentKind::Knn), &train, &test, &config).unwrap_err();
        assert!(matches!(err, Error::Usage(_)));
    }
}
