//! Dense tensors with tape-based reverse-mode differentiation.

pub mod checkpoint;
pub mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use params::{Bound, ParamStore};
pub use tape::{log_sum_exp, sigmoid, Tape, Var};
pub use tensor::Tensor;
