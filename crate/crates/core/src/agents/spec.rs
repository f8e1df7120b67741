use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::langevin::LangevinConfig;
use crate::error::{Error, Result};
use crate::nncore::{DEFAULT_LEARNING_RATE, DEFAULT_NUM_STEPS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    Mlp,
    Ensemble,
    EnsemblePlus,
    Dropout,
    Sgld,
    DeepKernel,
    Knn,
}

impl AgentKind {
    pub const ALL: [AgentKind; 7] = [
        AgentKind::Mlp,
        AgentKind::Ensemble,
        AgentKind::EnsemblePlus,
        AgentKind::Dropout,
        AgentKind::Sgld,
        AgentKind::DeepKernel,
        AgentKind::Knn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AgentKind::Mlp => "mlp",
            AgentKind::Ensemble => "ensemble",
            AgentKind::EnsemblePlus => "ensemble_plus",
            AgentKind::Dropout => "dropout",
            AgentKind::Sgld => "sgld",
            AgentKind::DeepKernel => "deep_kernel",
            AgentKind::Knn => "knn",
        }
    }

    pub fn supported() -> String {
        AgentKind::ALL.iter().map(|k| k.name()).collect::<Vec<_>>().join(", ")
    }
}

impl fmt::Display for AgentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AgentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AgentKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::usage(format!("unknown agent kind \"{s}\"; supported kinds: {}", AgentKind::supported())))
    }
}

/// A hyperparameter value: numeric, or a named option such as a bootstrap type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum HyperValue {
    Number(f64),
    Text(String),
}

impl fmt::Display for HyperValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HyperValue::Number(x) => write!(f, "{x}"),
            HyperValue::Text(s) => f.write_str(s),
        }
    }
}

impl From<f64> for HyperValue {
    fn from(x: f64) -> Self {
        HyperValue::Number(x)
    }
}

impl From<&str> for HyperValue {
    fn from(s: &str) -> Self {
        HyperValue::Text(s.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub kind: AgentKind,
    #[serde(default)]
    pub hyperparameters: BTreeMap<String, HyperValue>,
    #[serde(default)]
    pub seed: u64,
}

impl AgentSpec {
    pub fn new(kind: AgentKind) -> Self {
        AgentSpec {
            id: None,
            kind,
            hyperparameters: BTreeMap::new(),
            seed: 0,
        }
    }

    pub fn with(mut self, key: &str, value: impl Into<HyperValue>) -> Self {
        self.hyperparameters.insert(key.to_string(), value.into());
        self
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = Some(id.into());
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Explicit id, else `kind` followed by the sorted hyperparameters,
    /// e.g. `ensemble/ensemble_size=10,lambda=1`.
    pub fn name(&self) -> String {
        if let Some(id) = &self.id {
            return id.clone();
        }
        if self.hyperparameters.is_empty() {
            return self.kind.name().to_string();
        }
        let settings: Vec<String> = self.hyperparameters.iter().map(|(k, v)| format!("{k}={v}")).collect();
        format!("{}/{}", self.kind, settings.join(","))
    }

    /// Typed, validated hyperparameters with defaults filled in. All problems
    /// are reported together.
    pub fn resolve(&self) -> Result<ResolvedAgent> {
        let mut r = Reader::new(&self.hyperparameters);
        let resolved = match self.kind {
            AgentKind::Mlp | AgentKind::Ensemble | AgentKind::EnsemblePlus => {
                let network = NetworkConfig::read(&mut r);
                let (lambda, decay_form) = read_decay(&mut r);
                let size = match self.kind {
                    AgentKind::Mlp => 1,
                    _ => r.integer("ensemble_size", 10, 1),
                };
                let (prior_scale, bootstrap) = if self.kind == AgentKind::EnsemblePlus {
                    let prior_scale = match r.raw("prior_scale") {
                        Some(HyperValue::Text(s)) if s == "sqrt_beta" => PriorScale::SqrtTemperature,
                        _ => PriorScale::Fixed(r.number("prior_scale", 1.0, |x| x >= 0.0, "must be >= 0")),
                    };
                    let bootstrap = match r.text("bootstrap", "none", &["none", "exponential", "bernoulli"]).as_str() {
                        "exponential" => Bootstrap::Exponential,
                        "bernoulli" => Bootstrap::Bernoulli,
                        _ => Bootstrap::None,
                    };
                    (prior_scale, bootstrap)
                } else {
                    (PriorScale::Fixed(0.0), Bootstrap::None)
                };
                ResolvedAgent::Ensemble(EnsembleConfig {
                    network,
                    lambda,
                    decay_form,
                    size,
                    prior_scale,
                    bootstrap,
                })
            }
            AgentKind::Dropout => {
                let network = NetworkConfig::read(&mut r);
                let rate = r.number("dropout_rate", 0.1, |x| (0.0..1.0).contains(&x), "must lie in [0, 1)");
                let length_scale = r.number("length_scale", 1.0, |x| x > 0.0, "must be > 0");
                let decay = match r.text("decay_form", "length_scale", &["length_scale", "dsqrtbeta"]).as_str() {
                    "dsqrtbeta" => DropoutDecay::InputTemperature,
                    _ => DropoutDecay::LengthScale,
                };
                ResolvedAgent::Dropout(DropoutConfig {
                    network,
                    rate,
                    length_scale,
                    decay,
                })
            }
            AgentKind::Sgld => {
                let hidden = r.integer("hidden", 50, 1);
                let layers = r.integer("layers", 2, 1);
                let batch_size = r.optional_integer("batch_size", 1);
                let lambda = r.number("lambda", 1.0, |x| x > 0.0, "must be > 0");
                let chain = LangevinConfig {
                    learning_rate: r.number("learning_rate", 1e-4, |x| x > 0.0, "must be > 0"),
                    burn_in: r.integer("burn_in", 10_000, 0),
                    thin: r.integer("thin", 200, 1),
                    num_snapshots: r.integer("snapshots", 50, 1),
                    momentum: r.number("momentum", 0.0, |x| (0.0..1.0).contains(&x), "must lie in [0, 1)"),
                };
                ResolvedAgent::Sgld(SgldConfig {
                    hidden,
                    layers,
                    batch_size,
                    lambda,
                    chain,
                })
            }
            AgentKind::DeepKernel => {
                let network = NetworkConfig::read(&mut r);
                let (lambda, decay_form) = read_decay(&mut r);
                let noise = r.number("noise", super::DEFAULT_GP_NOISE, |x| x > 0.0, "must be > 0");
                ResolvedAgent::DeepKernel(DeepKernelConfig {
                    network,
                    lambda,
                    decay_form,
                    noise,
                })
            }
            AgentKind::Knn => {
                let k = r.integer("k", 5, 1);
                let weighting = match r.text("weighting", "uniform", &["uniform", "distance"]).as_str() {
                    "distance" => super::KnnWeighting::Distance,
                    _ => super::KnnWeighting::Uniform,
                };
                ResolvedAgent::Knn(KnnConfig { k, weighting })
            }
        };
        r.finish(self.kind)?;
        Ok(resolved)
    }
}

fn read_decay(r: &mut Reader<'_>) -> (f64, DecayForm) {
    let lambda = r.number("lambda", 1.0, |x| x >= 0.0, "must be >= 0");
    let form = match r.text("decay_form", "t", &["t", "dsqrtbeta"]).as_str() {
        "dsqrtbeta" => DecayForm::InputTemperature,
        _ => DecayForm::PerExample,
    };
    (lambda, form)
}

/// L2 decay coefficient of the network agents.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecayForm {
    /// `lambda / T`
    PerExample,
    /// `lambda * D * sqrt(beta) / T`
    InputTemperature,
}

impl DecayForm {
    pub fn scale(self, lambda: f64, meta: &super::EnvMeta) -> f64 {
        let t = meta.train_size.max(1) as f64;
        match self {
            DecayForm::PerExample => lambda / t,
            DecayForm::InputTemperature => lambda * meta.input_dim as f64 * meta.temperature.sqrt() / t,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropoutDecay {
    /// `l^2 (1 - p_drop) / (2 T)`
    LengthScale,
    /// `D * sqrt(beta) * l / T`
    InputTemperature,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bootstrap {
    None,
    /// Weights drawn from Exp(1).
    Exponential,
    /// Weights `2 * Bernoulli(1/2)`.
    Bernoulli,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PriorScale {
    Fixed(f64),
    SqrtTemperature,
}

impl PriorScale {
    pub fn value(self, temperature: f64) -> f64 {
        match self {
            PriorScale::Fixed(x) => x,
            PriorScale::SqrtTemperature => temperature.sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    pub hidden: usize,
    pub layers: usize,
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: Option<usize>,
}

impl NetworkConfig {
    fn read(r: &mut Reader<'_>) -> Self {
        NetworkConfig {
            hidden: r.integer("hidden", 50, 1),
            layers: r.integer("layers", 2, 1),
            learning_rate: r.number("learning_rate", DEFAULT_LEARNING_RATE, |x| x > 0.0, "must be > 0"),
            steps: r.integer("steps", DEFAULT_NUM_STEPS, 1),
            batch_size: r.optional_integer("batch_size", 1),
        }
    }

    pub fn dims(&self, meta: &super::EnvMeta) -> Vec<usize> {
        std::iter::once(meta.input_dim)
            .chain(std::iter::repeat_n(self.hidden, self.layers))
            .chain(std::iter::once(meta.num_classes))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleConfig {
    pub network: NetworkConfig,
    pub lambda: f64,
    pub decay_form: DecayForm,
    pub size: usize,
    pub prior_scale: PriorScale,
    pub bootstrap: Bootstrap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DropoutConfig {
    pub network: NetworkConfig,
    pub rate: f64,
    pub length_scale: f64,
    pub decay: DropoutDecay,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SgldConfig {
    pub hidden: usize,
    pub layers: usize,
    pub batch_size: Option<usize>,
    pub lambda: f64,
    pub chain: LangevinConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeepKernelConfig {
    pub network: NetworkConfig,
    pub lambda: f64,
    pub decay_form: DecayForm,
    pub noise: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnnConfig {
    pub k: usize,
    pub weighting: super::KnnWeighting,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ResolvedAgent {
    /// `mlp`, `ensemble` and `ensemble_plus` share one implementation.
    Ensemble(EnsembleConfig),
    Dropout(DropoutConfig),
    Sgld(SgldConfig),
    DeepKernel(DeepKernelConfig),
    Knn(KnnConfig),
}

struct Reader<'a> {
    map: &'a BTreeMap<String, HyperValue>,
    used: BTreeSet<&'static str>,
    errors: Vec<String>,
}

impl<'a> Reader<'a> {
    fn new(map: &'a BTreeMap<String, HyperValue>) -> Self {
        Reader {
            map,
            used: BTreeSet::new(),
            errors: Vec::new(),
        }
    }

    fn raw(&mut self, key: &'static str) -> Option<&'a HyperValue> {
        self.used.insert(key);
        self.map.get(key)
    }

    fn number(&mut self, key: &'static str, default: f64, ok: impl Fn(f64) -> bool, rule: &str) -> f64 {
        match self.raw(key) {
            None => default,
            Some(HyperValue::Number(x)) if x.is_finite() && ok(*x) => *x,
            Some(HyperValue::Number(x)) => {
                self.errors.push(format!("hyperparameters.{key}: {rule}, got {x}"));
                default
            }
            Some(HyperValue::Text(s)) => {
                self.errors.push(format!("hyperparameters.{key}: expected a number, got \"{s}\""));
                default
            }
        }
    }

    fn optional_integer(&mut self, key: &'static str, min: usize) -> Option<usize> {
        self.map.contains_key(key).then(|| self.integer(key, min, min))
    }

    fn integer(&mut self, key: &'static str, default: usize, min: usize) -> usize {
        let x = self.number(key, default as f64, |x| x.fract() == 0.0 && x >= min as f64, &format!("must be an integer >= {min}"));
        x as usize
    }

    fn text(&mut self, key: &'static str, default: &str, allowed: &[&str]) -> String {
        match self.raw(key) {
            None => default.to_string(),
            Some(HyperValue::Text(s)) if allowed.contains(&s.as_str()) => s.clone(),
            Some(other) => {
                self.errors.push(format!(
                    "hyperparameters.{key}: expected one of {}, got \"{other}\"",
                    allowed.join(", ")
                ));
                default.to_string()
            }
        }
    }

    fn finish(mut self, kind: AgentKind) -> Result<()> {
        for key in self.map.keys() {
            if !self.used.contains(key.as_str()) {
                self.errors.push(format!("hyperparameters.{key}: not a hyperparameter of agent kind {kind}"));
            }
        }
        if self.errors.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(self.errors))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kinds_round_trip_through_names() {
        for kind in AgentKind::ALL {
            assert_eq!(kind.name().parse::<AgentKind>().unwrap(), kind);
        }
        let err = "bbb".parse::<AgentKind>().unwrap_err().to_string();
        assert!(err.contains("bbb") && err.contains("ensemble_plus") && err.contains("knn"));
    }

    #[test]
    fn defaults_fill_in() {
        let ResolvedAgent::Ensemble(cfg) = AgentSpec::new(AgentKind::EnsemblePlus).resolve().unwrap() else {
            panic!("wrong variant");
        };
        assert_eq!(cfg.size, 10);
        assert_eq!(cfg.prior_scale, PriorScale::Fixed(1.0));
        assert_eq!(cfg.bootstrap, Bootstrap::None);
        assert_eq!(cfg.network.steps, 1000);
        let ResolvedAgent::Ensemble(cfg) = AgentSpec::new(AgentKind::Mlp).resolve().unwrap() else {
            panic!("wrong variant");
        };
        assert_eq!(cfg.size, 1);
        assert_eq!(cfg.prior_scale, PriorScale::Fixed(0.0));
    }

    #[test]
    fn all_errors_are_reported() {
        let spec = AgentSpec::new(AgentKind::Dropout)
            .with("dropout_rate", 1.5)
            .with("length_scale", "long")
            .with("ensemble_size", 3.0);
        let Err(Error::Config(errors)) = spec.resolve() else {
            panic!("expected configuration errors");
        };
        assert_eq!(errors.len(), 3, "{errors:?}");
        assert!(errors.iter().any(|e| e.contains("dropout_rate")));
        assert!(errors.iter().any(|e| e.contains("length_scale")));
        assert!(errors.iter().any(|e| e.contains("ensemble_size")));
    }

    #[test]
    fn integer_hyperparameters_reject_fractions() {
        let spec = AgentSpec::new(AgentKind::Knn).with("k", 2.5);
        assert!(spec.resolve().is_err());
        let spec = AgentSpec::new(AgentKind::Knn).with("k", 0.0);
        assert!(spec.resolve().is_err());
    }

    #[test]
    fn names_are_stable() {
        let spec = AgentSpec::new(AgentKind::Ensemble).with("lambda", 0.1).with("ensemble_size", 10.0);
        assert_eq!(spec.name(), "ensemble/ensemble_size=10,lambda=0.1");
        assert_eq!(AgentSpec::new(AgentKind::Mlp).name(), "mlp");
        assert_eq!(AgentSpec::new(AgentKind::Mlp).with_id("base").name(), "base");
    }

    #[test]
    fn decay_forms() {
        let meta = super::super::EnvMeta {
            input_dim: 2,
            num_classes: 2,
            temperature: 0.25,
            train_size: 10,
        };
        assert!((DecayForm::PerExample.scale(3.0, &meta) - 0.3).abs() < 1e-15);
        assert!((DecayForm::InputTemperature.scale(3.0, &meta) - 3.0 * 2.0 * 0.5 / 10.0).abs() < 1e-15);
    }
}
