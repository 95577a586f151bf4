//! Minimal tape-based reverse-mode differentiation over dense tensors.

mod ops;
mod tape;

pub use ops::{attention_probs, conv3x3_direct, AttnDims};
pub use tape::{BackwardFn, Grads, Tape, Var};
