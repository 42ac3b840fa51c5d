//! Training loss (KL divergence against possibly-soft labels) and
//! classification metrics.

use crate::tensor::{Graph, Tensor, TensorError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("label distribution row {row} sums to {sum}, expected 1")]
    BadRowSum { row: usize, sum: f64 },
    #[error("label distribution row {row} has negative entry {value}")]
    NegativeProb { row: usize, value: f64 },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Per-class probability vector per example, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelDistribution {
    pub probs: Vec<f64>,
    pub classes: usize,
}

impl LabelDistribution {
    pub fn new(probs: Vec<f64>, classes: usize) -> Result<Self, ObjectiveError> {
        let d = Self { probs, classes };
        d.validate()?;
        Ok(d)
    }

    pub fn one_hot(labels: &[usize], classes: usize) -> Self {
        let mut probs = vec![0.0; labels.len() * classes];
        for (r, &y) in labels.iter().enumerate() {
            probs[r * classes + y] = 1.0;
        }
        Self { probs, classes }
    }

    pub fn rows(&self) -> usize {
        self.probs.len() / self.classes
    }

    pub fn validate(&self) -> Result<(), ObjectiveError> {
        for r in 0..self.rows() {
            let row = &self.probs[r * self.classes..(r + 1) * self.classes];
            if let Some(&v) = row.iter().find(|&&v| v < 0.0) {
                return Err(ObjectiveError::NegativeProb { row: r, value: v });
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(ObjectiveError::BadRowSum { row: r, sum });
            }
        }
        Ok(())
    }

    /// Hard label per row: argmax with ties broken to the lowest index.
    pub fn hard_labels(&self) -> Vec<usize> {
        (0..self.rows())
            .map(|r| argmax(&self.probs[r * self.classes..(r + 1) * self.classes]))
            .collect()
    }
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Per-example KL(target || softmax(logits)) as a [rows] tensor.
pub fn kl_per_example(
    g: &mut Graph,
    logits: Tensor,
    target: &LabelDistribution,
) -> Result<Tensor, ObjectiveError> {
    target.validate()?;
    Ok(g.kl_rows(logits, &target.probs)?)
}

/// Mean-over-batch KL loss; the training objective everywhere.
pub fn kl_loss(
    g: &mut Graph,
    logits: Tensor,
    target: &LabelDistribution,
) -> Result<Tensor, ObjectiveError> {
    let per = kl_per_example(g, logits, target)?;
    Ok(g.mean_all(per))
}

/// Argmax match rate; ties break to the lowest class index.
pub fn accuracy(logits: &[f64], classes: usize, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let correct = labels
        .iter()
        .enumerate()
        .filter(|(r, &y)| argmax(&logits[r * classes..(r + 1) * classes]) == y)
        .count();
    correct as f64 / labels.len() as f64
}
