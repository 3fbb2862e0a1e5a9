//! Per-class prototypes and the drift-corrected class mean built from them.
//!
//! Prototypes track each class by exponential moving average of its batch
//! feature means. The table stores the raw geometric accumulator (zero
//! before a class's first batch) and projects to the unit sphere when read.
//! Projecting the stored value instead would hand the very first batch a
//! unit-length head start that retention near 1 can never wash out over a
//! short stream; the accumulator keeps every batch weighted by gamma alone.
//!
//! The corrected mean shifts a prototype by the displacement between a
//! class's stored replay features and the features the current extractor
//! assigns those same inputs, which cancels representation drift. Treating
//! stored and current features as correlated paired draws also yields a
//! closed-form variance for that estimator, and the per-dimension
//! correlation doubles as a mutual information signal between the two
//! snapshots.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::memory::MemoryEntry;
use crate::ndgrad::{Tensor, NORM_EPS};

fn normalize(v: &[f64]) -> Option<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm <= NORM_EPS {
        return None;
    }
    Some(v.iter().map(|x| x / norm).collect())
}

#[derive(Debug, Clone)]
pub struct PrototypeTable {
    dim: usize,
    /// EMA retention: each update keeps this fraction of the old prototype.
    gamma: f64,
    protos: BTreeMap<usize, Vec<f64>>,
}

impl PrototypeTable {
    pub fn new(dim: usize, gamma: f64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidConfig("prototype dim must be positive".into()));
        }
        if !(0.0..=1.0).contains(&gamma) {
            return Err(Error::InvalidConfig(format!(
                "prototype retention {gamma} outside [0, 1]"
            )));
        }
        Ok(PrototypeTable {
            dim,
            gamma,
            protos: BTreeMap::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn len(&self) -> usize {
        self.protos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.protos.is_empty()
    }

    /// Raw accumulator for a class; its norm grows toward the class's mean
    /// feature length as updates accumulate.
    pub fn get(&self, class: usize) -> Option<&[f64]> {
        self.protos.get(&class).map(|v| v.as_slice())
    }

    /// Sphere-projected prototype, the form every consumer of a class
    /// direction wants. None for unseen classes and for accumulators that
    /// have no direction yet.
    pub fn unit(&self, class: usize) -> Option<Vec<f64>> {
        self.protos.get(&class).and_then(|v| normalize(v))
    }

    pub fn classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.protos.keys().copied()
    }

    /// Folds one batch of features into the table: for every class present,
    /// the accumulator keeps `gamma` of itself plus `1 - gamma` of the raw
    /// batch class mean. A class's first appearance starts from the zero
    /// accumulator.
    pub fn update_batch(&mut self, feats: &Tensor, labels: &[usize]) -> Result<()> {
        if feats.rows() != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "prototype update",
                detail: format!("{} rows vs {} labels", feats.rows(), labels.len()),
            });
        }
        if feats.cols() != self.dim {
            return Err(Error::ShapeMismatch {
                op: "prototype update",
                detail: format!("feature width {} vs table dim {}", feats.cols(), self.dim),
            });
        }
        let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (r, &y) in labels.iter().enumerate() {
            by_class.entry(y).or_default().push(r);
        }
        for (y, rows) in by_class {
            let mut mean = vec![0.0; self.dim];
            for &r in &rows {
                for (m, v) in mean.iter_mut().zip(feats.row_slice(r)) {
                    *m += v / rows.len() as f64;
                }
            }
            let acc = self.protos.entry(y).or_insert_with(|| vec![0.0; self.dim]);
            for (a, b) in acc.iter_mut().zip(&mean) {
                *a = self.gamma * *a + (1.0 - self.gamma) * b;
            }
        }
        Ok(())
    }

    /// Checkpoint view.
    pub fn snapshot(&self) -> Vec<(usize, Vec<f64>)> {
        self.protos
            .iter()
            .map(|(&id, v)| (id, v.clone()))
            .collect()
    }

    pub fn from_parts(dim: usize, gamma: f64, parts: Vec<(usize, Vec<f64>)>) -> Result<Self> {
        let mut table = PrototypeTable::new(dim, gamma)?;
        for (id, v) in parts {
            if v.len() != dim {
                return Err(Error::Checkpoint(format!(
                    "prototype {id} has width {} instead of {dim}",
                    v.len()
                )));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Checkpoint(format!(
                    "prototype {id} holds non-finite values"
                )));
            }
            if table.protos.insert(id, v).is_some() {
                return Err(Error::Checkpoint(format!("prototype {id} appears twice")));
            }
        }
        Ok(table)
    }
}

/// Drift-corrected class mean: the prototype, shifted by how much the
/// class's stored replay features have moved under the current extractor
/// (raw mean of recomputed features minus raw mean of insertion-time
/// features), renormalized for the cosine classifier. `current` holds the
/// recomputed features row-aligned with `entries`. The raw means keep the
/// shift proportional to how concentrated the class is; normalizing them
/// first would inflate the correction exactly when the features are too
/// diffuse to trust. Errors on an empty class or when the shifted vector
/// loses its direction; callers fall back to the plain current mean.
pub fn corrected_mean(
    proto: &[f64],
    entries: &[MemoryEntry],
    current: &Tensor,
) -> Result<Vec<f64>> {
    if entries.is_empty() {
        return Err(Error::EmptyInput("corrected_mean over empty class".into()));
    }
    if current.rows() != entries.len() || current.cols() != proto.len() {
        return Err(Error::ShapeMismatch {
            op: "corrected_mean",
            detail: format!(
                "current {}x{} vs {} entries of width {}",
                current.rows(),
                current.cols(),
                entries.len(),
                proto.len()
            ),
        });
    }
    let d = proto.len();
    let n = entries.len() as f64;
    let mut stored_mean = vec![0.0; d];
    for e in entries {
        if e.z.len() != d {
            return Err(Error::ShapeMismatch {
                op: "corrected_mean",
                detail: format!("stored feature width {} vs {d}", e.z.len()),
            });
        }
        for (m, v) in stored_mean.iter_mut().zip(&e.z) {
            *m += v / n;
        }
    }
    let mut current_mean = vec![0.0; d];
    for r in 0..current.rows() {
        for (m, v) in current_mean.iter_mut().zip(current.row_slice(r)) {
            *m += v / n;
        }
    }
    let shifted: Vec<f64> = proto
        .iter()
        .zip(stored_mean.iter().zip(&current_mean))
        .map(|(p, (z, m))| p - z + m)
        .collect();
    normalize(&shifted).ok_or_else(|| Error::Domain {
        op: "corrected_mean",
        detail: format!("shifted prototype norm fell below {NORM_EPS}"),
    })
}

/// Variance of the drift-corrected mean estimator over `n` paired draws
/// whose stored and current per-dimension deviations have stds `sigma_stored`
/// and `sigma_current` with correlation `rho`: the paired difference cancels
/// the shared component.
pub fn corrected_estimator_variance(
    sigma_stored: f64,
    sigma_current: f64,
    rho: f64,
    n: usize,
) -> f64 {
    (sigma_stored * sigma_stored + sigma_current * sigma_current
        - 2.0 * rho * sigma_stored * sigma_current)
        / n as f64
}

/// Variance of the plain sample mean of the current features.
pub fn naive_estimator_variance(sigma_current: f64, n: usize) -> f64 {
    sigma_current * sigma_current / n as f64
}

/// The paired estimator beats the plain mean exactly when the stored
/// deviation is small relative to the correlated part of the current one.
pub fn correction_reduces_variance(sigma_stored: f64, sigma_current: f64, rho: f64) -> bool {
    sigma_stored < 2.0 * rho * sigma_current
}

/// Mutual information in nats between jointly Gaussian feature snapshots
/// with per-dimension correlations `rhos`, assuming independent dimensions:
/// the sum of -0.5 ln(1 - rho^2). A correlation at or beyond +-1 means a
/// deterministic dependence, reported as infinite.
pub fn cross_time_mi(rhos: &[f64]) -> f64 {
    let mut total = 0.0;
    for &r in rhos {
        if r.abs() >= 1.0 {
            return f64::INFINITY;
        }
        total += -0.5 * (1.0 - r * r).ln();
    }
    total
}
