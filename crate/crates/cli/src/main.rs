use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use testbed_core::cli::{
    correlation_report, emit_report, load_csv_dataset, parse_config, read_records_csv, run_config, write_outputs,
    CorrelationSettings, DatasetOptions,
};
use testbed_core::Result;

#[derive(Parser)]
#[command(name = "testbed", version, about = "Evaluate marginal and joint predictions of Bayesian classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute the sweep or real-data evaluation described by a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; overrides the config.
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Also write a leaderboard normalised by this agent.
        #[arg(long)]
        baseline: Option<String>,
    },
    /// Turn a records file into a leaderboard.
    Report {
        records: PathBuf,
        #[arg(long)]
        baseline: String,
        #[arg(long, default_value = ".")]
        output: PathBuf,
    },
    /// Correlate testbed scores with real-data scores per agent family.
    Correlate {
        testbed: PathBuf,
        real: PathBuf,
        #[arg(long, default_value_t = 1000)]
        n_bootstrap: usize,
        #[arg(long, default_value_t = 10)]
        low_max: usize,
        #[arg(long, default_value_t = 1000)]
        high_min: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the report as JSON here instead of printing a table.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Dataset utilities.
    Dataset {
        #[command(subcommand)]
        command: DatasetCommand,
    },
}

#[derive(Subcommand)]
enum DatasetCommand {
    /// Parse a CSV dataset and summarise it.
    Check {
        path: PathBuf,
        #[arg(long)]
        label_column: String,
        #[arg(long, default_value_t = 0.8)]
        train_ratio: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn read_records(path: &Path) -> Result<Vec<testbed_core::evaluator::EvalRecord>> {
    read_records_csv(std::fs::File::open(path)?)
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run {
            config,
            output,
            workers,
            seed,
            baseline,
        } => {
            let mut cfg = parse_config(&config)?;
            if let Some(w) = workers {
                cfg.workers = w.max(1);
            }
            if let Some(s) = seed {
                cfg.seed = s;
                cfg.sweep.seed = s;
            }
            let baseline = baseline.or(cfg.baseline.clone());
            let dir = output.or(cfg.output.clone()).unwrap_or_else(|| PathBuf::from("."));
            let records = run_config(&cfg)?;
            for r in records.iter().filter(|r| r.failed()) {
                eprintln!("cell failed: {} tau={} T={:?}: {}", r.agent, r.tau, r.train_size, r.error.as_deref().unwrap_or(""));
            }
            write_outputs(&dir, &records, baseline.as_deref())?;
            println!("wrote {} records to {}", records.len(), dir.join("records.csv").display());
        }
        Command::Report { records, baseline, output } => {
            let board = emit_report(&read_records(&records)?, &baseline)?;
            std::fs::create_dir_all(&output)?;
            std::fs::write(output.join("leaderboard.csv"), board.to_csv()?)?;
            std::fs::write(output.join("leaderboard.json"), board.to_json()?)?;
            print!("{}", board.to_csv()?);
        }
        Command::Correlate {
            testbed,
            real,
            n_bootstrap,
            low_max,
            high_min,
            seed,
            output,
        } => {
            let settings = CorrelationSettings {
                low_max,
                high_min,
                n_bootstrap,
            };
            let report = correlation_report(&read_records(&testbed)?, &read_records(&real)?, &settings, seed)?;
            match output {
                Some(path) => std::fs::write(path, report.to_json()?)?,
                None => {
                    println!("family,regime,tau,pairs,r,p5,p95");
                    for e in &report.entries {
                        println!("{},{:?},{},{},{:.4},{:.4},{:.4}", e.family, e.regime, e.tau, e.pairs, e.r, e.lower, e.upper);
                    }
                }
            }
        }
        Command::Dataset {
            command:
                DatasetCommand::Check {
                    path,
                    label_column,
                    train_ratio,
                    seed,
                },
        } => {
            let ds = load_csv_dataset(
                &path,
                &DatasetOptions {
                    train_ratio,
                    seed,
                    ..DatasetOptions::new(&label_column)
                },
            )?;
            println!("rows: {}", ds.train.len() + ds.test.len());
            println!("features: {} ({})", ds.feature_names.len(), ds.feature_names.join(", "));
            println!("classes: {} ({})", ds.classes.len(), ds.classes.join(", "));
            println!("split: {} train / {} test", ds.train.len(), ds.test.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
