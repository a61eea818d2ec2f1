//! Dense tensors, a reverse-mode tape and the Adam optimizer.

mod adam;
mod check;
mod float;
mod tape;
mod tensor;

pub use adam::{clip_grad_norm, AdamState, NoamSchedule};
pub use check::finite_diff_check;
pub use float::Float;
pub use tape::{AttentionLayout, Gradients, Tape, Unary, Var};
pub use tensor::Tensor;


#[cfg(test)]
mod tests;
