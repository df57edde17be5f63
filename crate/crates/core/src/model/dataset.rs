use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Row-major feature matrix with integer class labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    dim: usize,
    classes: usize,
    features: Vec<f64>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(dim: usize, classes: usize, features: Vec<f64>, labels: Vec<usize>) -> Result<Dataset> {
        if dim == 0 {
            return Err(invalid("dataset feature dimension must be at least 1"));
        }
        if features.len() != labels.len() * dim {
            return Err(Error::Shape(format!(
                "{} labels need {} feature values, got {}",
                labels.len(),
                labels.len() * dim,
                features.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(invalid(format!("label {bad} is not below class count {classes}")));
        }
        Ok(Dataset { dim, classes, features, labels })
    }

    pub fn empty(dim: usize, classes: usize) -> Dataset {
        Dataset { dim, classes, features: Vec::new(), labels: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Dataset { dim: self.dim, classes: self.classes, features, labels }
    }

    /// Replaces each label `y` by `(y + 1) mod classes`.
    pub fn with_rotated_labels(&self) -> Dataset {
        let mut out = self.clone();
        out.labels.iter_mut().for_each(|l| *l = (*l + 1) % self.classes);
        out
    }

    /// Per-class sample counts.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}
