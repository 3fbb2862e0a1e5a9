//! Nearest-class-mean inference over unit feature vectors.
//!
//! Class means are rebuilt from replay memory at evaluation time, either as
//! the plain mean of the current features of each class's stored inputs or
//! as the drift-corrected estimate anchored on the class prototype. Both
//! variants are renormalized, so nearest-in-euclidean and
//! highest-cosine predictions coincide; ties resolve to the lowest class id.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::memory::ReplayMemory;
use crate::model::Extractor;
use crate::ndgrad::{Tensor, NORM_EPS};
use crate::prototypes::{corrected_mean, PrototypeTable};
use crate::stream::HoldoutSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeanMode {
    /// Mean of the current features of the class's stored inputs.
    Current,
    /// Prototype shifted by the stored-to-current feature displacement.
    Corrected,
}

/// How each class mean was actually produced. Corrected mode degrades to the
/// current mean per class when the correction is undefined for it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeanProvenance {
    Current,
    Corrected,
    FallbackCurrent,
}

#[derive(Debug, Clone)]
pub struct ClassMeans {
    dim: usize,
    entries: BTreeMap<usize, (Vec<f64>, MeanProvenance)>,
}

impl ClassMeans {
    pub fn from_raw(dim: usize, entries: BTreeMap<usize, (Vec<f64>, MeanProvenance)>) -> Result<Self> {
        for (c, (m, _)) in &entries {
            if m.len() != dim {
                return Err(Error::ShapeMismatch {
                    op: "class means",
                    detail: format!("class {c} mean has width {} instead of {dim}", m.len()),
                });
            }
        }
        Ok(ClassMeans { dim, entries })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.keys().copied()
    }

    pub fn get(&self, class: usize) -> Option<&[f64]> {
        self.entries.get(&class).map(|(m, _)| m.as_slice())
    }

    pub fn provenance(&self, class: usize) -> Option<MeanProvenance> {
        self.entries.get(&class).map(|&(_, p)| p)
    }

    /// Nearest mean in euclidean distance; ties go to the lowest class id
    /// because iteration is ascending and only a strictly smaller distance
    /// displaces the incumbent.
    pub fn nearest(&self, z: &[f64]) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (&c, (m, _)) in &self.entries {
            let d: f64 = z.iter().zip(m).map(|(a, b)| (a - b) * (a - b)).sum();
            if best.map_or(true, |(_, bd)| d < bd) {
                best = Some((c, d));
            }
        }
        best.map(|(c, _)| c)
    }

    /// Highest cosine similarity; same tie rule. On unit vectors this always
    /// agrees with [`nearest`](Self::nearest).
    pub fn nearest_cosine(&self, z: &[f64]) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (&c, (m, _)) in &self.entries {
            let s: f64 = z.iter().zip(m).map(|(a, b)| a * b).sum();
            if best.map_or(true, |(_, bs)| s > bs) {
                best = Some((c, s));
            }
        }
        best.map(|(c, _)| c)
    }
}

fn unit_mean_of_rows(feats: &Tensor) -> Option<Vec<f64>> {
    let n = feats.rows() as f64;
    let mut m = vec![0.0; feats.cols()];
    for r in 0..feats.rows() {
        for (mi, v) in m.iter_mut().zip(feats.row_slice(r)) {
            *mi += v / n;
        }
    }
    let norm = m.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm <= NORM_EPS {
        return None;
    }
    m.iter_mut().for_each(|v| *v /= norm);
    Some(m)
}

/// Rebuilds the per-class means from replay memory with the current
/// extractor. Corrected mode needs the class prototype and a well-defined
/// displacement; wherever either is missing it falls back to the current
/// mean and records that in the provenance.
pub fn build_means(
    extractor: &Extractor,
    memory: &ReplayMemory,
    prototypes: &PrototypeTable,
    mode: MeanMode,
) -> Result<ClassMeans> {
    let dim = extractor.config().feature_dim;
    let mut entries = BTreeMap::new();
    for c in memory.class_ids() {
        let stored = memory.class_entries(c);
        if stored.is_empty() {
            continue;
        }
        let xs = Tensor::from_rows(
            &stored.iter().map(|e| e.x.clone()).collect::<Vec<_>>(),
        )?;
        let current = extractor.features_value(&xs)?;
        let plain = unit_mean_of_rows(&current).ok_or_else(|| Error::Domain {
            op: "build_means",
            detail: format!("class {c} current feature mean has no direction"),
        })?;
        let (mean, prov) = match mode {
            MeanMode::Current => (plain, MeanProvenance::Current),
            MeanMode::Corrected => match prototypes.unit(c) {
                Some(p) => match corrected_mean(&p, stored, &current) {
                    Ok(m) => (m, MeanProvenance::Corrected),
                    Err(_) => (plain, MeanProvenance::FallbackCurrent),
                },
                None => (plain, MeanProvenance::FallbackCurrent),
            },
        };
        entries.insert(c, (mean, prov));
    }
    if entries.is_empty() {
        return Err(Error::EmptyInput("build_means over empty memory".into()));
    }
    ClassMeans::from_raw(dim, entries)
}

/// Correct/total counts for one evaluated class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Evaluation {
    pub correct: usize,
    pub total: usize,
}

impl Evaluation {
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

/// Classifies every feature row against the means and tallies per-label
/// counts. Predictions range over every class in `means`, never a subset.
pub fn evaluate_features(
    means: &ClassMeans,
    feats: &Tensor,
    labels: &[usize],
) -> Result<BTreeMap<usize, Evaluation>> {
    if feats.rows() != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "evaluate_features",
            detail: format!("{} rows vs {} labels", feats.rows(), labels.len()),
        });
    }
    let mut out: BTreeMap<usize, Evaluation> = BTreeMap::new();
    for (r, &y) in labels.iter().enumerate() {
        let pred = means.nearest(feats.row_slice(r)).ok_or_else(|| {
            Error::EmptyInput("evaluate_features with no class means".into())
        })?;
        let e = out.entry(y).or_insert(Evaluation {
            correct: 0,
            total: 0,
        });
        e.total += 1;
        e.correct += usize::from(pred == y);
    }
    Ok(out)
}

/// Runs the extractor over the holdout rows of the requested classes and
/// scores them against the means. Classes absent from the holdout are
/// skipped.
pub fn evaluate_holdout(
    extractor: &Extractor,
    means: &ClassMeans,
    holdout: &HoldoutSet,
    classes: &[usize],
) -> Result<BTreeMap<usize, Evaluation>> {
    let mut out = BTreeMap::new();
    for &c in classes {
        let Some(xs) = holdout.class_samples(c) else {
            continue;
        };
        let feats = extractor.features_value(xs)?;
        let labels = vec![c; feats.rows()];
        for (y, e) in evaluate_features(means, &feats, &labels)? {
            out.insert(y, e);
        }
    }
    Ok(out)
}

/// Sample-weighted accuracy over a set of per-class evaluations.
pub fn pooled_accuracy(evals: &BTreeMap<usize, Evaluation>) -> f64 {
    let correct: usize = evals.values().map(|e| e.correct).sum();
    let total: usize = evals.values().map(|e| e.total).sum();
    if total == 0 {
        0.0
    } else {
        correct as f64 / total as f64
    }
}
