//! Dense `f64` tensors with reverse-mode differentiation.
//!
//! A [`Tape`] and the values recorded on it form a single-owner group: build,
//! run forward and run backward on one thread. Separate tapes share nothing
//! and can live on separate threads.

mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{check_gradients, grad_check};
pub use params::{Ctx, GradBuffer, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var, masked_softmax_value};
pub use tensor::Tensor;
