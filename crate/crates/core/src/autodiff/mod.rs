//! Reverse-mode differentiation over dense tensors.

mod params;
mod tape;

pub use params::{Gradients, Param, ParamId, ParamStore};
pub use tape::{Tape, Var};
