//! Reverse-mode differentiation over coarse primitives.
//!
//! A [`Tape`] records each primitive (convolution, softmax, ZNCC, bilinear
//! sampling, rigid alignment, ...) together with whatever its hand-written
//! adjoint needs. [`Tape::backward`] then walks the record in reverse and
//! returns a [`GradientMap`] with one entry per parameter node.
//!
//! [`finite_diff`] is the independent oracle every adjoint is checked against.

mod align;
mod check;
mod tape;

pub use align::{svd_alignment_gradient, AlignmentGradient};
pub use check::{finite_diff, finite_diff_scaled, relative_error};
pub use tape::{GradientMap, NodeId, Tape};

use crate::error::Result;

/// Free-function form of [`Tape::backward`].
pub fn backward(tape: &Tape, output: NodeId) -> Result<GradientMap> {
    tape.backward(output)
}
