use std::collections::BTreeSet;
use std::io::Read;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::seeding::{derive_rng, stream};

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetOptions {
    pub label_column: String,
    pub normalize: bool,
    pub train_ratio: f64,
    pub seed: u64,
}

impl DatasetOptions {
    pub fn new(label_column: &str) -> Self {
        DatasetOptions {
            label_column: label_column.to_string(),
            normalize: true,
            train_ratio: 0.8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedDataset {
    pub train: Dataset,
    pub test: Dataset,
    pub feature_names: Vec<String>,
    /// Label strings in the order of their integer codes.
    pub classes: Vec<String>,
}

pub fn load_csv_dataset(path: &Path, options: &DatasetOptions) -> Result<LoadedDataset> {
    read_csv_dataset(std::fs::File::open(path)?, options)
}

/// Parse a headed CSV with numeric features and a categorical label column,
/// split it by seed and optionally standardise the features with the
/// training split's statistics.
pub fn read_csv_dataset<R: Read>(input: R, options: &DatasetOptions) -> Result<LoadedDataset> {
    if !(options.train_ratio > 0.0 && options.train_ratio < 1.0) {
        return Err(Error::domain(format!("train ratio {} outside (0, 1)", options.train_ratio)));
    }
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let headers: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let label_idx = headers
        .iter()
        .position(|h| *h == options.label_column)
        .ok_or_else(|| Error::usage(format!("no column named \"{}\"", options.label_column)))?;
    let feature_names: Vec<String> = headers.iter().enumerate().filter(|(i, _)| *i != label_idx).map(|(_, h)| h.clone()).collect();

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut raw_labels: Vec<String> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let line = i + 1;
        let mut row = Vec::with_capacity(feature_names.len());
        for (j, cell) in record.iter().enumerate() {
            if j == label_idx {
                raw_labels.push(cell.to_string());
                continue;
            }
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                row: line,
                column: headers[j].clone(),
                message: format!("\"{cell}\" is not a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row: line,
                    column: headers[j].clone(),
                    message: format!("\"{cell}\" is not finite"),
                });
            }
            row.push(v);
        }
        rows.push(row);
    }
    let n = rows.len();
    if n < 2 {
        return Err(Error::usage("a dataset needs at least two rows"));
    }
    let classes: Vec<String> = raw_labels.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    let labels: Vec<usize> = raw_labels
        .iter()
        .map(|l| classes.binary_search(l).expect("label is in the class list"))
        .collect();

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut derive_rng(options.seed, &[stream::SPLIT]));
    let n_train = ((n as f64 * options.train_ratio).round() as usize).clamp(1, n - 1);
    let (train_idx, test_idx) = order.split_at(n_train);

    let d = feature_names.len();
    let mut inputs = DMatrix::from_fn(n, d, |r, c| rows[r][c]);
    if options.normalize {
        for c in 0..d {
            let m = train_idx.iter().map(|&r| inputs[(r, c)]).sum::<f64>() / n_train as f64;
            let var = train_idx.iter().map(|&r| (inputs[(r, c)] - m).powi(2)).sum::<f64>() / n_train as f64;
            let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
            inputs.column_mut(c).apply(|v| *v = (*v - m) / sd);
        }
    }
    let all = Dataset::new(inputs, labels)?;
    Ok(LoadedDataset {
        train: all.select(train_idx),
        test: all.select(test_idx),
        feature_names,
        classes,
    })
}
