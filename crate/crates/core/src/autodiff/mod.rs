//! Reverse-mode automatic differentiation over dense tensors.

mod check;
mod tape;

pub use check::finite_difference_check;
pub use tape::{Gradients, Tape, Var};

