//! Dense tensors with reverse-mode differentiation.

mod adam;
mod gradcheck;
pub mod io;
pub mod kernels;
mod scalar;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{analytic_grad, check_all_ops, finite_diff_check, finite_diff_check_coords, relative_error};
pub use scalar::Scalar;
pub use tape::{CustomBackward, Tape, Var};
pub use tensor::Tensor;

/// Default group-norm variance floor.
pub const GN_EPS: f64 = 1e-5;
