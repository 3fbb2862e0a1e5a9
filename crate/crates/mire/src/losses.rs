//! Training objectives on unit-norm embedding batches.
//!
//! The pair-weighting loss mines informative pairs by comparing each
//! similarity against the hardest example on the opposite side; the entropy
//! term is a kernel estimate of embedding spread on the sphere; the
//! cross-time consistency penalty rewards per-dimension correlation between
//! a class's current features and the features frozen into replay memory.
//! Mining and the degenerate-dimension masks are selections, not functions
//! of the parameters, so they are computed from values and baked into the
//! graph as constants; everything that should carry gradient does.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndgrad::{Tape, Tensor, Var};

/// Pair mining and weighting knobs. `alpha` tempers the positive term,
/// `beta` the negative term, `epsilon` widens the mining margin, and
/// `lambda` is the similarity offset.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct MsLossParams {
    pub alpha: f64,
    pub beta: f64,
    pub epsilon: f64,
    pub lambda: f64,
}

impl Default for MsLossParams {
    fn default() -> Self {
        MsLossParams {
            alpha: 2.0,
            beta: 50.0,
            epsilon: 0.1,
            lambda: 0.5,
        }
    }
}

impl MsLossParams {
    pub fn validate(&self) -> Result<()> {
        if self.alpha <= 0.0 || self.beta <= 0.0 {
            return Err(Error::InvalidConfig(
                "pair loss temperatures must be positive".into(),
            ));
        }
        if !self.epsilon.is_finite() || !self.lambda.is_finite() {
            return Err(Error::InvalidConfig("mining margin and offset must be finite".into()));
        }
        Ok(())
    }
}

fn require_unit_rows(tape: &Tape, v: Var, op: &'static str) -> Result<()> {
    let t = tape.value(v);
    for r in 0..t.rows() {
        let norm: f64 = t.row_slice(r).iter().map(|x| x * x).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-8 {
            return Err(Error::NotUnitNorm { row: r, norm });
        }
    }
    let _ = op;
    Ok(())
}

/// Mined pair masks for one batch, derived from similarity values.
/// `pos[i][j]` selects same-class pairs no easier than the hardest negative
/// plus the margin; `neg[i][j]` selects other-class pairs no easier than the
/// hardest positive minus the margin. An anchor with no candidates on one
/// side mines nothing on the other (empty max is -inf, empty min is +inf).
fn mine_pairs(sims: &Tensor, labels: &[usize], eps: f64) -> (Tensor, Tensor) {
    let b = labels.len();
    let mut pos = vec![0.0; b * b];
    let mut neg = vec![0.0; b * b];
    for i in 0..b {
        let row = sims.row_slice(i);
        let mut hardest_neg = f64::NEG_INFINITY;
        let mut hardest_pos = f64::INFINITY;
        for j in 0..b {
            if labels[j] != labels[i] {
                hardest_neg = hardest_neg.max(row[j]);
            } else if j != i {
                hardest_pos = hardest_pos.min(row[j]);
            }
        }
        for j in 0..b {
            if j != i && labels[j] == labels[i] && row[j] < hardest_neg + eps {
                pos[i * b + j] = 1.0;
            }
            if labels[j] != labels[i] && row[j] > hardest_pos - eps {
                neg[i * b + j] = 1.0;
            }
        }
    }
    (
        Tensor::new(b, b, pos).expect("square mask"),
        Tensor::new(b, b, neg).expect("square mask"),
    )
}

/// Pair-weighting loss over a unit-norm embedding batch `emb` with one label
/// per row. Each anchor contributes a softplus-style log over its mined
/// positives and negatives; anchors that mine nothing contribute zero
/// through log(1 + 0).
pub fn ms_loss(tape: &Tape, emb: Var, labels: &[usize], p: &MsLossParams) -> Result<Var> {
    p.validate()?;
    let [b, _] = tape.shape(emb);
    if b != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "ms_loss",
            detail: format!("{b} embedding rows vs {} labels", labels.len()),
        });
    }
    require_unit_rows(tape, emb, "ms_loss")?;
    let sims = tape.gram(emb, emb)?;
    let (pos_mask, neg_mask) = mine_pairs(&tape.value(sims), labels, p.epsilon);
    let pos_mask = tape.constant(pos_mask);
    let neg_mask = tape.constant(neg_mask);
    let ones_col = tape.constant(Tensor::filled(b, 1, 1.0));

    let shifted = tape.add_scalar(sims, -p.lambda)?;
    // exponents stay bounded: |sims| <= 1 keeps beta * (s - lambda) <= 25
    let pos_exp = tape.exp(tape.scale(shifted, -p.alpha)?)?;
    let neg_exp = tape.exp(tape.scale(shifted, p.beta)?)?;
    let pos_rows = tape.matmul(tape.mul(pos_exp, pos_mask)?, ones_col)?;
    let neg_rows = tape.matmul(tape.mul(neg_exp, neg_mask)?, ones_col)?;
    let pos_log = tape.log(tape.add_scalar(pos_rows, 1.0)?)?;
    let neg_log = tape.log(tape.add_scalar(neg_rows, 1.0)?)?;
    let pos_term = tape.scale(tape.sum(pos_log)?, 1.0 / p.alpha)?;
    let neg_term = tape.scale(tape.sum(neg_log)?, 1.0 / p.beta)?;
    tape.scale(tape.add(pos_term, neg_term)?, 1.0 / b as f64)
}

/// Kernel estimate of the entropy of the embedding distribution on the unit
/// sphere at concentration `delta`: the negative mean log of the batch's own
/// kernel density, -mean_i LSE_j(delta * S_ij) + ln B. Higher means more
/// spread out.
pub fn entropy_estimate(tape: &Tape, emb: Var, delta: f64) -> Result<Var> {
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "entropy concentration {delta} must be positive and finite"
        )));
    }
    require_unit_rows(tape, emb, "entropy_estimate")?;
    let [b, _] = tape.shape(emb);
    let sims = tape.gram(emb, emb)?;
    let lse = tape.row_logsumexp(tape.scale(sims, delta)?)?;
    let m = tape.mean(lse)?;
    tape.add_scalar(tape.scale(m, -1.0)?, (b as f64).ln())
}

/// Entropy-regularized variant knobs: `mi_weight` scales the entropy bonus
/// and `mi_delta` sets the kernel concentration.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct MireParams {
    pub ms: MsLossParams,
    pub mi_weight: f64,
    pub mi_delta: f64,
}

impl Default for MireParams {
    fn default() -> Self {
        MireParams {
            ms: MsLossParams::default(),
            mi_weight: 0.02,
            mi_delta: 5.0,
        }
    }
}

/// Pair loss minus the weighted entropy bonus. A zero weight skips the
/// entropy nodes entirely, so the graph (and every downstream float) is
/// identical to the plain pair loss.
pub fn mire_loss(tape: &Tape, emb: Var, labels: &[usize], p: &MireParams) -> Result<Var> {
    let base = ms_loss(tape, emb, labels, &p.ms)?;
    if p.mi_weight == 0.0 {
        return Ok(base);
    }
    if p.mi_weight < 0.0 || !p.mi_weight.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "entropy weight {} must be non-negative and finite",
            p.mi_weight
        )));
    }
    let h = entropy_estimate(tape, emb, p.mi_delta)?;
    tape.sub(base, tape.scale(h, p.mi_weight)?)
}

/// Sum over feature dimensions of the Pearson correlation between a class's
/// current features (differentiable) and the features frozen at storage time
/// (constant), both centered on their own means over the given rows. Returns
/// `None` with fewer than two rows. A dimension with (numerically) zero
/// variance on either side is masked to exactly zero and passes no gradient.
/// `mean_over_dims` averages instead of summing, making the penalty scale
/// free in the feature width.
pub fn cc_penalty(
    tape: &Tape,
    current: Var,
    stored: &Tensor,
    mean_over_dims: bool,
) -> Result<Option<Var>> {
    let [n, d] = tape.shape(current);
    if [n, d] != [stored.rows(), stored.cols()] {
        return Err(Error::ShapeMismatch {
            op: "cc_penalty",
            detail: format!(
                "current {n}x{d} vs stored {}x{}",
                stored.rows(),
                stored.cols()
            ),
        });
    }
    if n < 2 {
        return Ok(None);
    }
    let inv_n = 1.0 / n as f64;
    let ones_row = tape.constant(Tensor::filled(1, n, 1.0));

    // stored side is constant: center and fold its inverse sd into one weight
    let mut s_mean = vec![0.0; d];
    for r in 0..n {
        for (m, v) in s_mean.iter_mut().zip(stored.row_slice(r)) {
            *m += v * inv_n;
        }
    }
    let mut s_centered = Vec::with_capacity(n * d);
    let mut s_ss = vec![0.0; d];
    for r in 0..n {
        for (j, v) in stored.row_slice(r).iter().enumerate() {
            let c = v - s_mean[j];
            s_centered.push(c);
            s_ss[j] += c * c;
        }
    }

    let z_mean = tape.scale(tape.matmul(ones_row, current)?, inv_n)?;
    let z_centered = tape.add_bias(current, tape.scale(z_mean, -1.0)?)?;
    let z_ss = tape.matmul(ones_row, tape.mul(z_centered, z_centered)?)?;
    let z_ss_val = tape.value(z_ss);

    // a sum of squared deviations under ~1e-24 counts as zero variance
    const VAR_FLOOR: f64 = 1e-24;
    let mut weight = vec![0.0; d];
    let mut keep = vec![0.0; d];
    for j in 0..d {
        if s_ss[j] > VAR_FLOOR && z_ss_val.data()[j] > VAR_FLOOR {
            weight[j] = 1.0 / s_ss[j].sqrt();
            keep[j] = 1.0;
        }
    }
    let s_centered = tape.constant(Tensor::new(n, d, s_centered)?);
    let weight = tape.constant(Tensor::new(1, d, weight)?);
    let keep_c = tape.constant(Tensor::new(1, d, keep.clone())?);
    let drop_c = tape.constant(Tensor::new(
        1,
        d,
        keep.iter().map(|k| 1.0 - k).collect(),
    )?);

    let num = tape.matmul(ones_row, tape.mul(z_centered, s_centered)?)?;
    // dropped dims get their sum of squares pinned to 1 so sqrt stays in
    // domain; the weight of 0 then kills both value and gradient
    let z_ss_safe = tape.add(tape.mul(z_ss, keep_c)?, drop_c)?;
    let rho = tape.mul(tape.div(num, tape.sqrt(z_ss_safe)?)?, weight)?;
    let total = tape.sum(rho)?;
    Ok(Some(if mean_over_dims {
        tape.scale(total, 1.0 / d as f64)?
    } else {
        total
    }))
}

/// Batch-all triplet loss on a unit-norm embedding batch: the mean hinge over
/// all (anchor, positive, negative) label triples in squared euclidean form,
/// written on cosine similarities.
pub fn triplet_loss(tape: &Tape, emb: Var, labels: &[usize], margin: f64) -> Result<Var> {
    require_unit_rows(tape, emb, "triplet_loss")?;
    let sims = tape.gram(emb, emb)?;
    tape.triplet_all_on_sims(sims, labels, margin)
}

/// Mean over ordered positive pairs of log(1 + sum_neg exp(s_in - s_ip)).
pub fn n_pairs_loss(tape: &Tape, emb: Var, labels: &[usize]) -> Result<Var> {
    require_unit_rows(tape, emb, "n_pairs_loss")?;
    let sims = tape.gram(emb, emb)?;
    tape.n_pairs_on_sims(sims, labels)
}
