//! Gradient verification against central finite differences.
//!
//! The numeric side never touches backward: every probe rebuilds a fresh tape
//! and evaluates the forward value only, so it is an independent oracle for
//! the adjoint code.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Central difference (f(x + h e_i) - f(x - h e_i)) / 2h for every coordinate
/// of every input. `f` must evaluate to a scalar.
pub fn finite_difference(
    f: impl Fn(&Tape, &[Var]) -> Result<Var>,
    inputs: &[Tensor],
    h: f64,
) -> Result<Vec<Tensor>> {
    let eval = |probe: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = probe.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&tape, &vars)?;
        let v = tape.scalar_value(out)?;
        if !v.is_finite() {
            return Err(Error::NonFinite {
                context: "finite_difference probe".into(),
            });
        }
        Ok(v)
    };

    let mut out = Vec::with_capacity(inputs.len());
    for k in 0..inputs.len() {
        let mut grad = vec![0.0; inputs[k].numel()];
        for i in 0..inputs[k].numel() {
            let mut probe: Vec<Tensor> = inputs.to_vec();
            probe[k].data_mut()[i] += h;
            let plus = eval(&probe)?;
            probe[k].data_mut()[i] -= 2.0 * h;
            let minus = eval(&probe)?;
            grad[i] = (plus - minus) / (2.0 * h);
        }
        let [r, c] = inputs[k].shape();
        out.push(Tensor::new(r, c, grad)?);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// max over all coordinates of |analytic - numeric| / max(1e-8, |analytic| + |numeric|)
    pub max_rel_err: f64,
    /// max |analytic - numeric| over all coordinates divided by the larger of
    /// the two gradients' max norms (floored at 1e-8). Coordinate-wise
    /// relative error punishes near-zero components of stiff objectives far
    /// beyond what the difference quotient can resolve; this measures the
    /// mismatch against the gradient's own scale instead.
    pub scale_rel_err: f64,
    /// (input index, flat coordinate) where the max occurred
    pub worst: (usize, usize),
    pub analytic: Vec<Tensor>,
    pub numeric: Vec<Tensor>,
}

/// Compare backward-pass gradients of a scalar-valued graph against central
/// finite differences over every coordinate of every input.
pub fn grad_check_multi(
    f: impl Fn(&Tape, &[Var]) -> Result<Var>,
    inputs: &[Tensor],
    h: f64,
) -> Result<GradCheckReport> {
    if inputs.is_empty() {
        return Err(Error::EmptyInput("grad_check inputs".into()));
    }
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&tape, &vars)?;
    let v = tape.scalar_value(out)?;
    if !v.is_finite() {
        return Err(Error::NonFinite {
            context: format!("grad_check forward value {v}"),
        });
    }
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&var, t)| {
            grads
                .get(&tape, var)
                .unwrap_or_else(|| Tensor::zeros(t.rows(), t.cols()))
        })
        .collect();

    let numeric = finite_difference(&f, inputs, h)?;

    let mut max_rel_err = 0.0;
    let mut worst = (0, 0);
    let mut max_abs_diff = 0.0f64;
    let mut scale = 0.0f64;
    for k in 0..inputs.len() {
        for i in 0..inputs[k].numel() {
            let a = analytic[k].data()[i];
            let n = numeric[k].data()[i];
            if !a.is_finite() || !n.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("grad_check gradient at input {k} coord {i}"),
                });
            }
            let rel = (a - n).abs() / f64::max(1e-8, a.abs() + n.abs());
            if rel > max_rel_err {
                max_rel_err = rel;
                worst = (k, i);
            }
            max_abs_diff = max_abs_diff.max((a - n).abs());
            scale = scale.max(a.abs()).max(n.abs());
        }
    }
    Ok(GradCheckReport {
        max_rel_err,
        scale_rel_err: max_abs_diff / scale.max(1e-8),
        worst,
        analytic,
        numeric,
    })
}

/// Single-input convenience wrapper around [`grad_check_multi`].
pub fn grad_check(
    f: impl Fn(&Tape, Var) -> Result<Var>,
    input: &Tensor,
    h: f64,
) -> Result<GradCheckReport> {
    grad_check_multi(|tape, vars| f(tape, vars[0]), std::slice::from_ref(input), h)
}
