use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Labelled inputs: one row of `inputs` per label.
///
/// The same type carries training sets and test blocks of `tau` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: DMatrix<f64>,
    pub labels: Vec<usize>,
}

pub(crate) fn check_width(inputs: &DMatrix<f64>, width: usize) -> Result<()> {
    if inputs.ncols() == width {
        Ok(())
    } else {
        Err(Error::shape(format!("inputs have {} columns, expected {width}", inputs.ncols())))
    }
}

/// A block of `tau` test inputs and their labels.
pub type TauSample = Dataset;

impl Dataset {
    pub fn new(inputs: DMatrix<f64>, labels: Vec<usize>) -> Result<Self> {
        if inputs.nrows() != labels.len() {
            return Err(Error::shape(format!(
                "{} input rows but {} labels",
                inputs.nrows(),
                labels.len()
            )));
        }
        Ok(Dataset { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn check_labels(&self, num_classes: usize) -> Result<()> {
        match self.labels.iter().position(|&y| y >= num_classes) {
            Some(i) => Err(Error::domain(format!(
                "label {} at row {i} is outside [0, {num_classes})",
                self.labels[i]
            ))),
            None => Ok(()),
        }
    }

    /// Rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        let d = self.input_dim();
        let inputs = DMatrix::from_fn(indices.len(), d, |r, c| self.inputs[(indices[r], c)]);
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Dataset { inputs, labels }
    }
}
