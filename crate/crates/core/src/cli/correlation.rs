use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::CorrelationSettings;
use crate::error::{Error, Result};
use crate::evaluator::EvalRecord;
use crate::seeding::{derive_rng, stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Low,
    High,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationEntry {
    /// Agent family: the id up to the first `/`.
    pub family: String,
    pub regime: Regime,
    pub tau: usize,
    pub pairs: usize,
    pub r: f64,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub n_bootstrap: usize,
    pub seed: u64,
    pub entries: Vec<CorrelationEntry>,
}

impl CorrelationReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Pearson correlation, clamped to [-1, 1]; NaN when either side is constant.
pub fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx).powi(2);
        syy += (y - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return f64::NAN;
    }
    (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)
}

/// Linear-interpolation percentile of sorted values, `q` in [0, 1].
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Percentile bootstrap interval for Pearson's r at confidence `level`,
/// resampling pairs with replacement. Resamples with a constant side are
/// skipped.
pub fn bootstrap_interval(xs: &[f64], ys: &[f64], n_bootstrap: usize, seed: u64, level: f64) -> (f64, f64) {
    let n = xs.len();
    let mut rng = derive_rng(seed, &[stream::BOOTSTRAP]);
    let mut rs: Vec<f64> = (0..n_bootstrap)
        .filter_map(|_| {
            let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            let bx: Vec<f64> = idx.iter().map(|&i| xs[i]).collect();
            let by: Vec<f64> = idx.iter().map(|&i| ys[i]).collect();
            let r = pearson(&bx, &by);
            r.is_finite().then_some(r)
        })
        .collect();
    if rs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    rs.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    (percentile(&rs, tail), percentile(&rs, 1.0 - tail))
}

fn family(agent: &str) -> &str {
    agent.split_once('/').map_or(agent, |p| p.0)
}

type Scores = BTreeMap<(Regime, usize), BTreeMap<String, f64>>;

fn mean_scores(records: &[EvalRecord], regime_of: impl Fn(&EvalRecord) -> Option<Regime>) -> Scores {
    let mut sums: BTreeMap<(Regime, usize), BTreeMap<String, (f64, usize)>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.train_size.is_some() && !r.failed()) {
        if let Some(regime) = regime_of(r) {
            let slot = sums.entry((regime, r.tau)).or_default().entry(r.agent.clone()).or_insert((0.0, 0));
            slot.0 += r.kl_or_nll;
            slot.1 += 1;
        }
    }
    sums.into_iter()
        .map(|(k, m)| (k, m.into_iter().map(|(a, (s, c))| (a, s / c as f64)).collect()))
        .collect()
}

/// Correlate testbed scores with real-data scores across the settings of
/// each agent family, separately per data regime and `tau`.
///
/// Testbed cells belong to the low regime when `T <= low_max` and to the high
/// regime when `T >= high_min`. Real-data records use the same low rule; their
/// high regime is the largest training size present.
pub fn correlation_report(
    testbed: &[EvalRecord],
    real: &[EvalRecord],
    settings: &CorrelationSettings,
    seed: u64,
) -> Result<CorrelationReport> {
    let testbed_agents: BTreeSet<&str> = testbed.iter().map(|r| r.agent.as_str()).collect();
    let real_agents: BTreeSet<&str> = real.iter().map(|r| r.agent.as_str()).collect();
    let unmatched: Vec<&str> = testbed_agents.symmetric_difference(&real_agents).copied().collect();
    if !unmatched.is_empty() {
        return Err(Error::usage(format!("agents present in only one record set: {}", unmatched.join(", "))));
    }
    let low_max = settings.low_max;
    let high_min = settings.high_min;
    let real_max = real.iter().filter_map(|r| r.train_size).max().unwrap_or(0);
    let x_scores = mean_scores(testbed, |r| {
        let t = r.train_size?;
        if t <= low_max {
            Some(Regime::Low)
        } else if t >= high_min {
            Some(Regime::High)
        } else {
            None
        }
    });
    let y_scores = mean_scores(real, |r| {
        let t = r.train_size?;
        if t <= low_max {
            Some(Regime::Low)
        } else if t == real_max {
            Some(Regime::High)
        } else {
            None
        }
    });

    let mut entries = Vec::new();
    for (key, xs) in &x_scores {
        let Some(ys) = y_scores.get(key) else { continue };
        let mut by_family: BTreeMap<&str, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
        for (agent, x) in xs {
            if let Some(y) = ys.get(agent) {
                let slot = by_family.entry(family(agent)).or_default();
                slot.0.push(*x);
                slot.1.push(*y);
            }
        }
        for (fam, (x, y)) in by_family {
            if x.len() < 3 {
                continue;
            }
            let (lower, upper) = bootstrap_interval(&x, &y, settings.n_bootstrap, seed, 0.9);
            entries.push(CorrelationEntry {
                family: fam.to_string(),
                regime: key.0,
                tau: key.1,
                pairs: x.len(),
                r: pearson(&x, &y),
                lower,
                upper,
            });
        }
    }
    if entries.is_empty() {
        return Err(Error::usage(
            "no agent family has three or more settings scored in the same regime and tau on both record sets",
        ));
    }
    entries.sort_by(|a, b| (&a.family, a.regime, a.tau).cmp(&(&b.family, b.regime, b.tau)));
    Ok(CorrelationReport {
        n_bootstrap: settings.n_bootstrap,
        seed,
        entries,
    })
}
