//! Minimal dense-tensor engine: row-major [`Tensor`]s, a reverse-mode
//! autodiff [`Tape`], named parameter stores, a seeded PCG32 [`Rng`] and a
//! central finite-difference gradient checker.
//!
//! Everything is generic over [`Real`] so the same graph can run in `f32`
//! for training and `f64` for gradient checks.

mod error;
pub mod gradcheck;
mod kernels;
mod param;
mod real;
mod rng;
mod tape;
mod tensor;

pub use error::{Error, Result};
pub use gradcheck::{finite_diff_check, GradCheckOptions, GradCheckReport};
pub use param::{Graph, Init, Param, ParamId, ParamStore};
pub use real::Real;
pub use rng::Rng;
pub use tape::{OpKind, Reduction, Tape, Var, MASKED};
pub use tensor::{numel, Tensor};
