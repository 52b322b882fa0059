//! Minimal reverse-mode automatic differentiation over dense row-major tensors.

mod attention;
pub mod gradcheck;
mod tape;
mod tensor;

pub use attention::{affine, multi_head_attention, AttentionVars};
pub use gradcheck::{grad_check, GradCheckReport};
pub use tape::{Elementwise, Gradients, Tape, Var};
pub use tensor::{Real, Tensor};

#[cfg(test)]
mod tests;
