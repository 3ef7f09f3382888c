//! Minimal dense-tensor engine.
//!
//! Everything the models need is here: a contiguous [`Tensor`], a
//! counter-based [`Rng`] with stream splitting, a fixed set of kernels with
//! hand-written backward passes, a central-difference gradient checker, the
//! Adam optimizer and the `DITA` checkpoint format.
//!
//! Kernels are generic over [`Scalar`] so the same code runs in `f32` for
//! training and sampling and in `f64` for gradient certification.

pub mod checkpoint;
pub mod conv;
pub mod gradcheck;
pub mod kernels;
pub mod optim;
pub mod rng;
mod scalar;
mod tensor;

pub use checkpoint::{read_checkpoint, write_checkpoint, CheckpointEntry};
pub use gradcheck::{grad_check, grad_check_subset, GradCheckReport};
pub use kernels::matmul;
pub use optim::{Adam, AdamConfig};
pub use rng::Rng;
pub use scalar::Scalar;
pub use tensor::Tensor;
