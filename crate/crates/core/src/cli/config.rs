use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde_json::{Map, Value};

use crate::agents::{AgentKind, AgentSpec, HyperValue};
use crate::error::{Error, Result};
use crate::evaluator::{BlockScheme, SweepConfig, DEFAULT_MC_THRESHOLD, DEFAULT_REAL_HYPERPLANES};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Testbed,
    Real,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSource {
    pub path: PathBuf,
    pub label_column: String,
    pub normalize: bool,
    pub train_ratio: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RealConfig {
    pub datasets: Vec<DatasetSource>,
    /// Training-set sizes to subsample; `None` uses the whole training split.
    pub train_sizes: Option<Vec<usize>>,
    pub taus: Vec<usize>,
    pub num_blocks: usize,
    pub num_models: usize,
    pub num_hyperplanes: usize,
    pub mc_threshold: usize,
    pub scheme: BlockScheme,
}

/// Training sizes up to `low_max` form the low-data regime, sizes from
/// `high_min` the high-data regime.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorrelationSettings {
    pub low_max: usize,
    pub high_min: usize,
    pub n_bootstrap: usize,
}

impl Default for CorrelationSettings {
    fn default() -> Self {
        CorrelationSettings {
            low_max: 10,
            high_min: 1000,
            n_bootstrap: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub mode: Mode,
    pub seed: u64,
    pub workers: usize,
    pub output: Option<PathBuf>,
    pub baseline: Option<String>,
    pub sweep: SweepConfig,
    /// Grids already expanded to one spec per setting.
    pub agents: Vec<AgentSpec>,
    pub real: Option<RealConfig>,
    pub correlation: CorrelationSettings,
}

pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)?;
    let mut config = parse_config_str(&text)?;
    if let Some(real) = &mut config.real {
        let base = path.parent().unwrap_or(Path::new(""));
        let mut missing = Vec::new();
        for (i, d) in real.datasets.iter_mut().enumerate() {
            if d.path.is_relative() {
                d.path = base.join(&d.path);
            }
            if !d.path.is_file() {
                missing.push(format!("real.datasets[{i}].path: file {} does not exist", d.path.display()));
            }
        }
        if !missing.is_empty() {
            return Err(Error::Config(missing));
        }
    }
    Ok(config)
}

/// Parse and validate a run configuration; every problem is reported with
/// its path in the document.
pub fn parse_config_str(text: &str) -> Result<RunConfig> {
    let root: Value = serde_json::from_str(text)?;
    let mut errors = Vec::new();
    let Some(map) = root.as_object() else {
        return Err(Error::Config(vec!["(root): expected a JSON object".into()]));
    };
    let mut top = Fields::new(map, "", &mut errors);
    let mode = match top.string("mode").as_deref() {
        None | Some("testbed") => Mode::Testbed,
        Some("real") => Mode::Real,
        Some(other) => {
            top.error("mode", format!("expected \"testbed\" or \"real\", got \"{other}\""));
            Mode::Testbed
        }
    };
    let seed = top.u64("seed").unwrap_or(0);
    let workers = top.count("workers", 1).unwrap_or(1);
    let output = top.string("output").map(PathBuf::from);
    let baseline = top.string("baseline");
    let sweep_value = top.take("sweep");
    let agents_value = top.take("agents");
    let real_value = top.take("real");
    let correlation_value = top.take("correlation");
    top.finish();

    let mut sweep = SweepConfig::default();
    if let Some(v) = sweep_value {
        parse_sweep(v, &mut sweep, &mut errors);
    }
    sweep.seed = seed;

    let agents = match agents_value {
        None => {
            errors.push("agents: missing; at least one agent is required".into());
            Vec::new()
        }
        Some(v) => parse_agents(v, &mut errors),
    };
    let mut ids = BTreeSet::new();
    for spec in &agents {
        if !ids.insert(spec.name()) {
            errors.push(format!("agents: duplicate agent id \"{}\"", spec.name()));
        }
    }
    if let Some(b) = &baseline {
        if !agents.is_empty() && !ids.contains(b) {
            errors.push(format!("baseline: \"{b}\" is not one of the configured agent ids"));
        }
    }

    let real = real_value.and_then(|v| parse_real(v, &mut errors));
    if mode == Mode::Real && real.is_none() && !errors.iter().any(|e| e.starts_with("real")) {
        errors.push("real: required when mode is \"real\"".into());
    }

    let mut correlation = CorrelationSettings::default();
    if let Some(v) = correlation_value {
        match v.as_object() {
            None => errors.push("correlation: expected an object".into()),
            Some(m) => {
                let mut f = Fields::new(m, "correlation", &mut errors);
                correlation.low_max = f.count("low_max", 0).unwrap_or(correlation.low_max);
                correlation.high_min = f.count("high_min", 1).unwrap_or(correlation.high_min);
                correlation.n_bootstrap = f.count("n_bootstrap", 1).unwrap_or(correlation.n_bootstrap);
                f.finish();
                if correlation.low_max >= correlation.high_min {
                    errors.push("correlation.low_max: must be below correlation.high_min".into());
                }
            }
        }
    }

    if errors.is_empty() {
        Ok(RunConfig {
            mode,
            seed,
            workers,
            output,
            baseline,
            sweep,
            agents,
            real,
            correlation,
        })
    } else {
        Err(Error::Config(errors))
    }
}

fn parse_sweep(v: &Value, sweep: &mut SweepConfig, errors: &mut Vec<String>) {
    let Some(m) = v.as_object() else {
        errors.push("sweep: expected an object".into());
        return;
    };
    let mut f = Fields::new(m, "sweep", errors);
    if let Some(t) = f.positive_list("temperatures") {
        sweep.temperatures = t;
    }
    if let Some(t) = f.count_list("train_sizes") {
        sweep.train_sizes = t;
    }
    if let Some(t) = f.count_list("taus") {
        sweep.taus = t;
    }
    sweep.num_problems = f.count("num_problems", 1).unwrap_or(sweep.num_problems);
    sweep.num_test_samples = f.count("num_test_samples", 1).unwrap_or(sweep.num_test_samples);
    sweep.num_models = f.count("num_models", 1).unwrap_or(sweep.num_models);
    sweep.num_hyperplanes = f.bounded("num_hyperplanes", 0, 64).unwrap_or(sweep.num_hyperplanes);
    sweep.mc_threshold = f.count("mc_threshold", 0).unwrap_or(DEFAULT_MC_THRESHOLD);
    sweep.input_dim = f.count("input_dim", 1).unwrap_or(sweep.input_dim);
    sweep.num_classes = f.count("num_classes", 2).unwrap_or(sweep.num_classes);
    f.finish();
}

fn parse_agents(v: &Value, errors: &mut Vec<String>) -> Vec<AgentSpec> {
    let Some(list) = v.as_array() else {
        errors.push("agents: expected a list".into());
        return Vec::new();
    };
    if list.is_empty() {
        errors.push("agents: at least one agent is required".into());
    }
    let mut specs = Vec::new();
    for (i, entry) in list.iter().enumerate() {
        let path = format!("agents[{i}]");
        let Some(m) = entry.as_object() else {
            errors.push(format!("{path}: expected an object"));
            continue;
        };
        let mut f = Fields::new(m, &path, errors);
        let kind = match f.string("kind") {
            None => {
                f.error("kind", "missing".into());
                None
            }
            Some(k) => match k.parse::<AgentKind>() {
                Ok(kind) => Some(kind),
                Err(e) => {
                    f.error("kind", strip_usage(&e));
                    None
                }
            },
        };
        let id = f.string("id");
        let seed = f.u64("seed").unwrap_or(0);
        let grid_value = f.take("hyperparameters");
        f.finish();
        let grid = match grid_value {
            None => Some(Grid::new()),
            Some(v) => parse_grid(v, &format!("{path}.hyperparameters"), errors),
        };
        let (Some(kind), Some(grid)) = (kind, grid) else {
            continue;
        };
        let settings = expand_grid(&grid);
        let multiple = settings.len() > 1;
        for hyperparameters in settings {
            let mut spec = AgentSpec {
                id: None,
                kind,
                hyperparameters,
                seed,
            };
            spec.id = match &id {
                None => None,
                Some(id) if !multiple => Some(id.clone()),
                Some(id) => Some(format!("{id}/{}", spec.name().split_once('/').map_or("", |p| p.1))),
            };
            match spec.resolve() {
                Ok(_) => specs.push(spec),
                Err(Error::Config(list)) => {
                    for e in list {
                        let msg = format!("{path}.{e}");
                        if !errors.contains(&msg) {
                            errors.push(msg);
                        }
                    }
                }
                Err(e) => errors.push(format!("{path}: {e}")),
            }
        }
    }
    specs
}

fn strip_usage(e: &Error) -> String {
    match e {
        Error::Usage(m) => m.clone(),
        other => other.to_string(),
    }
}

type Grid = BTreeMap<String, Vec<HyperValue>>;

fn parse_grid(v: &Value, path: &str, errors: &mut Vec<String>) -> Option<Grid> {
    let Some(m) = v.as_object() else {
        errors.push(format!("{path}: expected an object"));
        return None;
    };
    let mut grid = Grid::new();
    for (key, value) in m {
        let values: Vec<&Value> = match value {
            Value::Array(items) => items.iter().collect(),
            other => vec![other],
        };
        if values.is_empty() {
            errors.push(format!("{path}.{key}: grid must not be empty"));
            continue;
        }
        let mut parsed = Vec::new();
        for item in values {
            match item {
                Value::Number(n) => parsed.push(HyperValue::Number(n.as_f64().unwrap_or(f64::NAN))),
                Value::String(s) => parsed.push(HyperValue::Text(s.clone())),
                _ => errors.push(format!("{path}.{key}: expected a number or a string")),
            }
        }
        grid.insert(key.clone(), parsed);
    }
    Some(grid)
}

/// Cartesian product of the grid, keys in sorted order, values in the order given.
pub fn expand_grid(grid: &BTreeMap<String, Vec<HyperValue>>) -> Vec<BTreeMap<String, HyperValue>> {
    let mut out = vec![BTreeMap::new()];
    for (key, values) in grid {
        out = out
            .into_iter()
            .flat_map(|partial| {
                values.iter().map(move |v| {
                    let mut next = partial.clone();
                    next.insert(key.clone(), v.clone());
                    next
                })
            })
            .collect();
    }
    out
}

fn parse_real(v: &Value, errors: &mut Vec<String>) -> Option<RealConfig> {
    let Some(m) = v.as_object() else {
        errors.push("real: expected an object".into());
        return None;
    };
    let before = errors.len();
    let mut f = Fields::new(m, "real", errors);
    let datasets_value = f.take("datasets");
    let train_sizes = f.count_list("train_sizes");
    let taus = f.count_list("taus").unwrap_or_else(|| vec![1, 100]);
    let num_blocks = f.count("num_blocks", 1).unwrap_or(1000);
    let num_models = f.count("num_models", 1).unwrap_or(1000);
    let num_hyperplanes = f.bounded("num_hyperplanes", 0, 64).unwrap_or(DEFAULT_REAL_HYPERPLANES);
    let mc_threshold = f.count("mc_threshold", 0).unwrap_or(DEFAULT_MC_THRESHOLD);
    let scheme = match f.string("block_scheme").as_deref() {
        None | Some("random") => BlockScheme::Random,
        Some("coverage") => BlockScheme::Coverage,
        Some(other) => {
            f.error("block_scheme", format!("expected \"random\" or \"coverage\", got \"{other}\""));
            BlockScheme::Random
        }
    };
    f.finish();
    let mut datasets = Vec::new();
    match datasets_value.and_then(Value::as_array) {
        None => errors.push("real.datasets: expected a nonempty list".into()),
        Some(list) => {
            if list.is_empty() {
                errors.push("real.datasets: expected a nonempty list".into());
            }
            for (i, d) in list.iter().enumerate() {
                let path = format!("real.datasets[{i}]");
                let Some(m) = d.as_object() else {
                    errors.push(format!("{path}: expected an object"));
                    continue;
                };
                let mut f = Fields::new(m, &path, errors);
                let file = f.string("path");
                if file.is_none() {
                    f.error("path", "missing".into());
                }
                let label_column = f.string("label_column");
                if label_column.is_none() {
                    f.error("label_column", "missing".into());
                }
                let normalize = f.boolean("normalize").unwrap_or(true);
                let train_ratio = f.number("train_ratio").unwrap_or(0.8);
                if !(train_ratio > 0.0 && train_ratio < 1.0) {
                    f.error("train_ratio", format!("must lie in (0, 1), got {train_ratio}"));
                }
                f.finish();
                if let (Some(file), Some(label_column)) = (file, label_column) {
                    datasets.push(DatasetSource {
                        path: PathBuf::from(file),
                        label_column,
                        normalize,
                        train_ratio,
                    });
                }
            }
        }
    }
    (errors.len() == before).then_some(RealConfig {
        datasets,
        train_sizes,
        taus,
        num_blocks,
        num_models,
        num_hyperplanes,
        mc_threshold,
        scheme,
    })
}

/// Typed access to the fields of one JSON object, recording errors with
/// their paths and flagging keys nobody asked for.
struct Fields<'a, 'e> {
    map: &'a Map<String, Value>,
    path: String,
    used: BTreeSet<&'static str>,
    errors: &'e mut Vec<String>,
}

impl<'a, 'e> Fields<'a, 'e> {
    fn new(map: &'a Map<String, Value>, path: &str, errors: &'e mut Vec<String>) -> Self {
        Fields {
            map,
            path: path.to_string(),
            used: BTreeSet::new(),
            errors,
        }
    }

    fn key_path(&self, key: &str) -> String {
        if self.path.is_empty() {
            key.to_string()
        } else {
            format!("{}.{key}", self.path)
        }
    }

    fn error(&mut self, key: &str, message: String) {
        let p = self.key_path(key);
        self.errors.push(format!("{p}: {message}"));
    }

    fn take(&mut self, key: &'static str) -> Option<&'a Value> {
        self.used.insert(key);
        self.map.get(key).filter(|v| !v.is_null())
    }

    fn string(&mut self, key: &'static str) -> Option<String> {
        match self.take(key)? {
            Value::String(s) => Some(s.clone()),
            other => {
                self.error(key, format!("expected a string, got {other}"));
                None
            }
        }
    }

    fn boolean(&mut self, key: &'static str) -> Option<bool> {
        match self.take(key)? {
            Value::Bool(b) => Some(*b),
            other => {
                self.error(key, format!("expected true or false, got {other}"));
                None
            }
        }
    }

    fn number(&mut self, key: &'static str) -> Option<f64> {
        match self.take(key)? {
            Value::Number(n) => n.as_f64(),
            other => {
                self.error(key, format!("expected a number, got {other}"));
                None
            }
        }
    }

    fn u64(&mut self, key: &'static str) -> Option<u64> {
        let v = self.take(key)?;
        match v.as_u64() {
            Some(x) => Some(x),
            None => {
                self.error(key, format!("expected a nonnegative integer, got {v}"));
                None
            }
        }
    }

    fn bounded(&mut self, key: &'static str, min: usize, max: usize) -> Option<usize> {
        let v = self.take(key)?;
        match v.as_u64() {
            Some(x) if (min as u64..=max as u64).contains(&x) => Some(x as usize),
            _ => {
                self.error(key, format!("expected an integer in [{min}, {max}], got {v}"));
                None
            }
        }
    }

    fn count(&mut self, key: &'static str, min: usize) -> Option<usize> {
        let v = self.take(key)?;
        match v.as_u64() {
            Some(x) if x >= min as u64 => Some(x as usize),
            _ => {
                self.error(key, format!("expected an integer >= {min}, got {v}"));
                None
            }
        }
    }

    fn list(&mut self, key: &'static str) -> Option<&'a Vec<Value>> {
        match self.take(key)? {
            Value::Array(items) if !items.is_empty() => Some(items),
            other => {
                self.error(key, format!("expected a nonempty list, got {other}"));
                None
            }
        }
    }

    fn count_list(&mut self, key: &'static str) -> Option<Vec<usize>> {
        let items = self.list(key)?;
        let parsed: Option<Vec<usize>> = items.iter().map(|v| v.as_u64().filter(|&x| x >= 1).map(|x| x as usize)).collect();
        if parsed.is_none() {
            self.error(key, "every entry must be an integer >= 1".into());
        }
        parsed
    }

    fn positive_list(&mut self, key: &'static str) -> Option<Vec<f64>> {
        let items = self.list(key)?;
        let parsed: Option<Vec<f64>> = items.iter().map(|v| v.as_f64().filter(|&x| x > 0.0)).collect();
        if parsed.is_none() {
            self.error(key, "every entry must be a positive number".into());
        }
        parsed
    }

    fn finish(self) {
        for key in self.map.keys() {
            if !self.used.contains(key.as_str()) {
                let p = self.key_path(key);
                self.errors.push(format!("{p}: unknown field"));
            }
        }
    }
}
