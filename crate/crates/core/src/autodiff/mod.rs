//! Reverse-mode differentiation over dense `f64` tensors.
//!
//! Operations are recorded on a [`Tape`] as they execute; [`Tape::backward`]
//! walks the record in reverse and returns gradients for leaves created with
//! `requires_grad`. Parameters live outside the tape and are re-recorded on
//! every step.

pub mod adam;
pub mod gradcheck;
pub mod physics;
pub mod tape;
pub mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use physics::{physics_loss, PhysicsTarget};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
