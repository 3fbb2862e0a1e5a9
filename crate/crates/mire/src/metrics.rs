//! Continual-learning score keeping.
//!
//! The central object is a lower-triangular accuracy matrix: row i holds the
//! accuracy on each task 0..=i measured right after task i finished
//! training. Average accuracy reads the final row; average forgetting
//! compares each earlier task's final accuracy against its best pre-final
//! value, so negative forgetting (late improvement) is representable.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndgrad::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new() -> Self {
        AccuracyMatrix { rows: Vec::new() }
    }

    /// Appends the evaluation row after learning one more task. Row i must
    /// score exactly tasks 0..=i.
    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        if row.len() != self.rows.len() + 1 {
            return Err(Error::ShapeMismatch {
                op: "accuracy matrix",
                detail: format!(
                    "row {} must have {} entries, got {}",
                    self.rows.len(),
                    self.rows.len() + 1,
                    row.len()
                ),
            });
        }
        if row.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::Domain {
                op: "accuracy matrix",
                detail: format!("accuracies outside [0, 1]: {row:?}"),
            });
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn num_tasks(&self) -> usize {
        self.rows.len()
    }

    pub fn get(&self, after_task: usize, on_task: usize) -> Option<f64> {
        self.rows.get(after_task).and_then(|r| r.get(on_task)).copied()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    /// Mean over the final row: how well every task is remembered at the end.
    pub fn average_accuracy(&self) -> Result<f64> {
        let last = self.rows.last().ok_or_else(|| {
            Error::EmptyInput("average accuracy of an empty matrix".into())
        })?;
        Ok(last.iter().sum::<f64>() / last.len() as f64)
    }

    /// Mean over tasks 0..T-1 of (best accuracy before the final row) minus
    /// (final accuracy). Needs at least two tasks.
    pub fn average_forgetting(&self) -> Result<f64> {
        let t = self.rows.len();
        if t < 2 {
            return Err(Error::EmptyInput(
                "forgetting needs at least two tasks".into(),
            ));
        }
        let last = &self.rows[t - 1];
        let mut total = 0.0;
        for task in 0..t - 1 {
            let best_before = self.rows[task..t - 1]
                .iter()
                .map(|r| r[task])
                .fold(f64::NEG_INFINITY, f64::max);
            total += best_before - last[task];
        }
        Ok(total / (t - 1) as f64)
    }
}

impl Default for AccuracyMatrix {
    fn default() -> Self {
        Self::new()
    }
}

/// Sample mean and a 1.96 * sd / sqrt(n) half-width (normal-approximation
/// 95% band). A single observation gets a zero half-width.
pub fn mean_and_ci(xs: &[f64]) -> Option<(f64, f64)> {
    if xs.is_empty() {
        return None;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() == 1 {
        return Some((mean, 0.0));
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    Some((mean, 1.96 * var.sqrt() / n.sqrt()))
}

/// Per-dimension variance of the rows (population form, divides by n).
pub fn per_dim_variance(feats: &Tensor) -> Vec<f64> {
    let n = feats.rows() as f64;
    let d = feats.cols();
    let mut mean = vec![0.0; d];
    for r in 0..feats.rows() {
        for (m, v) in mean.iter_mut().zip(feats.row_slice(r)) {
            *m += v / n;
        }
    }
    let mut var = vec![0.0; d];
    for r in 0..feats.rows() {
        for ((s, v), m) in var.iter_mut().zip(feats.row_slice(r)).zip(&mean) {
            *s += (v - m) * (v - m) / n;
        }
    }
    var
}

/// Mean euclidean distance between paired vectors, matched by key. Errors if
/// the key sets differ.
pub fn mean_vector_error(
    estimates: &std::collections::BTreeMap<usize, Vec<f64>>,
    truth: &std::collections::BTreeMap<usize, Vec<f64>>,
) -> Result<f64> {
    if estimates.is_empty() {
        return Err(Error::EmptyInput("mean_vector_error over no classes".into()));
    }
    if estimates.len() != truth.len() || estimates.keys().any(|k| !truth.contains_key(k)) {
        return Err(Error::ShapeMismatch {
            op: "mean_vector_error",
            detail: "estimate and truth class sets differ".into(),
        });
    }
    let mut total = 0.0;
    for (c, e) in estimates {
        let t = &truth[c];
        if e.len() != t.len() {
            return Err(Error::ShapeMismatch {
                op: "mean_vector_error",
                detail: format!("class {c}: widths {} vs {}", e.len(), t.len()),
            });
        }
        total += e
            .iter()
            .zip(t)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
    }
    Ok(total / estimates.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    #[test]
    fn two_task_hand_example() {
        let mut m = AccuracyMatrix::new();
        m.push_row(vec![0.9]).unwrap();
        m.push_row(vec![0.6, 0.8]).unwrap();
        assert!((m.average_accuracy().unwrap() - 0.7).abs() < 1e-15);
        assert!((m.average_forgetting().unwrap() - 0.3).abs() < 1e-15);
    }

    #[test]
    fn forgetting_can_be_negative_and_ignores_the_final_row_in_the_max() {
        let mut m = AccuracyMatrix::new();
        m.push_row(vec![0.5]).unwrap();
        m.push_row(vec![0.9, 0.3]).unwrap();
        // the task improved after its own stage: best-before is 0.5, not 0.9
        assert!((m.average_forgetting().unwrap() - (-0.4)).abs() < 1e-15);
    }

    #[test]
    fn forgetting_uses_best_intermediate_value() {
        let mut m = AccuracyMatrix::new();
        m.push_row(vec![0.6]).unwrap();
        m.push_row(vec![0.8, 0.9]).unwrap();
        m.push_row(vec![0.4, 0.7, 0.95]).unwrap();
        // task 0 peaked at 0.8 in row 1; task 1 peaked at 0.9 in row 1
        let want = ((0.8 - 0.4) + (0.9 - 0.7)) / 2.0;
        assert!((m.average_forgetting().unwrap() - want).abs() < 1e-15);
    }

    #[test]
    fn matrix_shape_and_range_are_enforced() {
        let mut m = AccuracyMatrix::new();
        assert!(m.push_row(vec![0.5, 0.5]).is_err());
        m.push_row(vec![0.5]).unwrap();
        assert!(m.push_row(vec![0.5]).is_err());
        assert!(m.push_row(vec![0.5, 1.5]).is_err());
        assert!(m.average_forgetting().is_err());
        assert!(AccuracyMatrix::new().average_accuracy().is_err());
    }

    #[test]
    fn confidence_band_hand_values() {
        let (mean, half) = mean_and_ci(&[1.0, 2.0, 3.0]).unwrap();
        assert!((mean - 2.0).abs() < 1e-15);
        assert!((half - 1.96 / 3.0f64.sqrt()).abs() < 1e-12);
        let (m1, h1) = mean_and_ci(&[4.2]).unwrap();
        assert_eq!((m1, h1), (4.2, 0.0));
        assert!(mean_and_ci(&[]).is_none());
    }

    #[test]
    fn per_dim_variance_hand_values() {
        let t = Tensor::from_rows(&[vec![1.0, 0.0], vec![3.0, 0.0]]).unwrap();
        let v = per_dim_variance(&t);
        assert!((v[0] - 1.0).abs() < 1e-15);
        assert_eq!(v[1], 0.0);
    }

    #[test]
    fn vector_error_hand_values() {
        let mut est = BTreeMap::new();
        let mut truth = BTreeMap::new();
        est.insert(0, vec![0.0, 0.0]);
        truth.insert(0, vec![3.0, 4.0]);
        est.insert(1, vec![1.0, 1.0]);
        truth.insert(1, vec![1.0, 1.0]);
        assert!((mean_vector_error(&est, &truth).unwrap() - 2.5).abs() < 1e-15);
        truth.remove(&1);
        assert!(mean_vector_error(&est, &truth).is_err());
    }
}
