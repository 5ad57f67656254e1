//! Tensors, a recording tape for reverse-mode gradients, named parameter
//! storage, and a finite-difference gradient checker.

mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckError, GradCheckReport, DEFAULT_EPSILON};
pub use params::{BoundParams, ParamStore};
pub use tape::{AutodiffError, Tape, TensorId};
pub use tensor::Tensor;
