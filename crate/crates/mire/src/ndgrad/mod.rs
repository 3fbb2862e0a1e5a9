//! Minimal reverse-mode autodiff over dense rank-2 f64 tensors.
//!
//! Design: eager evaluation onto a flat Wengert tape that is rebuilt every
//! iteration. A [`Var`] is an index into its tape; values are computed when
//! the op is recorded, adjoints when [`Tape::backward`] walks the tape in
//! reverse. Fan-out accumulates adjoints with `+=`, so a node feeding several
//! consumers gets the sum of their contributions. No broadcasting beyond the
//! documented row-wise bias add; shape errors are rejected at op construction.

mod check;
mod tape;
mod tensor;

pub use check::{finite_difference, grad_check, grad_check_multi, GradCheckReport};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

/// Norm guard for row normalization: rows with ‖v‖ at or below this are
/// rejected rather than clamped, so degenerate inputs surface as errors.
pub const NORM_EPS: f64 = 1e-12;
