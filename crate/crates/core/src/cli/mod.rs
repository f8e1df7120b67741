//! Run configuration, record files, leaderboards and correlation reports.

mod config;
mod correlation;
mod dataset;
mod report;

use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rayon::prelude::*;

pub use self::config::{expand_grid, parse_config, parse_config_str, CorrelationSettings, DatasetSource, Mode, RealConfig, RunConfig};
pub use self::correlation::{bootstrap_interval, correlation_report, pearson, CorrelationEntry, CorrelationReport, Regime};
pub use self::dataset::{load_csv_dataset, read_csv_dataset, DatasetOptions, LoadedDataset};
pub use self::report::{
    emit_report, read_records_csv, records_to_csv, write_records_csv, Leaderboard, LeaderboardRow, LEADERBOARD_HEADER,
    RECORDS_HEADER,
};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::evaluator::{evaluate_nll_real, run_sweep, AgentFactory, EvalRecord, RealEvalConfig};
use crate::seeding::{derive_rng, derive_seed, stream};

/// Execute a parsed configuration and return its records.
pub fn run_config(config: &RunConfig) -> Result<Vec<EvalRecord>> {
    match config.mode {
        Mode::Testbed => {
            let agents: Vec<Arc<dyn AgentFactory>> = config.agents.iter().map(|a| Arc::new(a.clone()) as Arc<dyn AgentFactory>).collect();
            run_sweep(&config.sweep, &agents, config.workers)
        }
        Mode::Real => run_real(config),
    }
}

/// First `size` rows of a seeded permutation of `train`.
pub fn subsample(train: &Dataset, size: usize, seed: u64) -> Dataset {
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut derive_rng(seed, &[stream::SPLIT, size as u64]));
    order.truncate(size.min(train.len()));
    train.select(&order)
}

/// Real-data NLL per `(agent, T, tau)`, averaged over the configured datasets.
fn run_real(config: &RunConfig) -> Result<Vec<EvalRecord>> {
    let real = config
        .real
        .as_ref()
        .ok_or_else(|| Error::usage("real mode needs a \"real\" section"))?;
    let datasets: Vec<LoadedDataset> = real
        .datasets
        .iter()
        .map(|d| {
            load_csv_dataset(
                &d.path,
                &DatasetOptions {
                    label_column: d.label_column.clone(),
                    normalize: d.normalize,
                    train_ratio: d.train_ratio,
                    seed: config.seed,
                },
            )
        })
        .collect::<Result<_>>()?;
    let mut tasks = Vec::new();
    for (a, _) in config.agents.iter().enumerate() {
        for (i, ds) in datasets.iter().enumerate() {
            let sizes = real.train_sizes.clone().unwrap_or_else(|| vec![ds.train.len()]);
            for t in sizes {
                for &tau in &real.taus {
                    tasks.push((a, i, t.min(ds.train.len()), tau));
                }
            }
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers.max(1))
        .build()
        .map_err(|e| Error::usage(format!("cannot start worker pool: {e}")))?;
    let results: Vec<(usize, usize, usize, EvalRecord)> = pool.install(|| {
        tasks
            .par_iter()
            .map(|&(a, i, t, tau)| {
                let agent = &config.agents[a];
                let ds = &datasets[i];
                let seed = derive_seed(config.seed, &[i as u64, t as u64]);
                let eval = RealEvalConfig {
                    tau,
                    num_blocks: real.num_blocks,
                    num_models: real.num_models,
                    num_hyperplanes: real.num_hyperplanes,
                    mc_threshold: real.mc_threshold,
                    scheme: real.scheme,
                    num_classes: Some(ds.classes.len().max(2)),
                    seed,
                };
                let record = evaluate_nll_real(agent, &subsample(&ds.train, t, seed), &ds.test, &eval).unwrap_or_else(|e| EvalRecord {
                    agent: agent.name(),
                    beta: None,
                    train_size: Some(t),
                    tau,
                    kl_or_nll: f64::NAN,
                    stderr: f64::NAN,
                    count: 0,
                    seconds: 0.0,
                    seed,
                    error: Some(e.to_string()),
                });
                (a, t, tau, record)
            })
            .collect()
    });
    let mut keys: Vec<(usize, usize, usize)> = results.iter().map(|r| (r.0, r.1, r.2)).collect();
    keys.sort();
    keys.dedup();
    let mut records: Vec<EvalRecord> = keys
        .into_iter()
        .map(|(a, t, tau)| {
            let group: Vec<&EvalRecord> = results.iter().filter(|r| (r.0, r.1, r.2) == (a, t, tau)).map(|r| &r.3).collect();
            let n = group.len() as f64;
            let failures: Vec<&str> = group.iter().filter_map(|r| r.error.as_deref()).collect();
            EvalRecord {
                agent: config.agents[a].name(),
                beta: None,
                train_size: Some(t),
                tau,
                kl_or_nll: group.iter().map(|r| r.kl_or_nll).sum::<f64>() / n,
                stderr: group.iter().map(|r| r.stderr.powi(2)).sum::<f64>().sqrt() / n,
                count: group.iter().map(|r| r.count).sum(),
                seconds: group.iter().map(|r| r.seconds).sum(),
                seed: config.seed,
                error: (!failures.is_empty()).then(|| failures.join("; ")),
            }
        })
        .collect();
    records.sort_by(|x, y| (&x.agent, x.train_size, x.tau).cmp(&(&y.agent, y.train_size, y.tau)));
    Ok(records)
}

/// Write `records.csv` and, given a baseline, `leaderboard.csv` and
/// `leaderboard.json` into `dir`.
pub fn write_outputs(dir: &Path, records: &[EvalRecord], baseline: Option<&str>) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("records.csv"), records_to_csv(records)?)?;
    if let Some(b) = baseline {
        let board = emit_report(records, b)?;
        std::fs::write(dir.join("leaderboard.csv"), board.to_csv()?)?;
        std::fs::write(dir.join("leaderboard.json"), board.to_json()?)?;
    }
    Ok(())
}
