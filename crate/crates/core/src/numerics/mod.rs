//! Dense tensors, the kernels the networks need, a reverse-mode tape, the
//! Adam optimizer and a central-difference gradient oracle.

pub mod adam;
pub mod gradcheck;
pub mod ops;
pub mod tape;
pub mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{fd_gradient, relative_error};
pub use tape::{Elementwise, Gradients, Tape, Var};
pub use tensor::{Real, Tensor};
