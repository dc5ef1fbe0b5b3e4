//! Labeled datasets, their on-disk format, and how they are split across
//! clients and the server.

mod idx;
mod partition;
mod synthetic;

use ndarray::{Array2, Axis};

pub use idx::{encode_idx_images, encode_idx_labels, load_idx, parse_idx_images, parse_idx_labels};
pub use partition::{class_counts_of, dirichlet_partition, dirichlet_partition_pool, imbalance_counts, sample_proxy, ImbalanceSpec, Partition};
pub use synthetic::generate_synthetic;

use crate::error::{Error, Result};
use crate::model::Batch;

/// Feature matrix with one integer label per row.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    inputs: Array2<f64>,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(inputs: Array2<f64>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if inputs.nrows() != labels.len() {
            return Err(Error::invalid(format!(
                "{} rows but {} labels",
                inputs.nrows(),
                labels.len()
            )));
        }
        if let Some(y) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::invalid(format!("label {y} out of range for {num_classes} classes")));
        }
        Ok(Dataset {
            inputs,
            labels,
            num_classes,
        })
    }

    pub fn inputs(&self) -> &Array2<f64> {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Rows `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            inputs: self.inputs.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// Labeled minibatch over rows `indices`.
    pub fn batch(&self, indices: &[usize]) -> Batch {
        Batch::labeled(
            self.inputs.select(Axis(0), indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
            self.num_classes,
        )
        .expect("dataset rows are valid batch rows")
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Same inputs with labels replaced.
    pub fn with_labels(&self, labels: Vec<usize>) -> Result<Dataset> {
        Dataset::new(self.inputs.clone(), labels, self.num_classes)
    }

    /// Indices of each class, in ascending order.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); self.num_classes];
        for (i, &y) in self.labels.iter().enumerate() {
            by_class[y].push(i);
        }
        by_class
    }
}
