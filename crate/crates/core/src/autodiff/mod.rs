//! Reverse-mode automatic differentiation over dense tensors.

mod gradcheck;
pub(crate) mod kernels;
mod tape;

pub use gradcheck::grad_check;
pub use tape::{NormKind, PoolMode, Tape, Var};
