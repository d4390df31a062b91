//! Dense `f64` tensors and a reverse-mode tape over them.

mod gradcheck;
pub mod kernels;
mod tape;
mod value;

pub use gradcheck::{grad_check, relative_error, GradCheckReport, REL_ERROR_FLOOR};
pub use tape::{Gradients, Tape, Var};
pub use value::Tensor;

/// Clamp used by every `log` on a probability.
pub const LOG_EPS: f64 = 1e-7;
