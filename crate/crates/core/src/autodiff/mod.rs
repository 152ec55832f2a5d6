//! Minimal reverse-mode tensor engine with exactly the primitives the
//! spatio-temporal denoiser needs.

pub mod gradcheck;
pub mod kernels;
pub mod params;
pub mod tape;
pub mod tensor;

pub use gradcheck::{finite_diff_check, finite_diff_check_subset, GradCheckReport};
pub use params::{BoundParams, ParamSet};
pub use tape::{moments, Gradients, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
