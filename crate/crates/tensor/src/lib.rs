//! Minimal dense-tensor math with reverse-mode automatic differentiation.
//!
//! The op set covers exactly what a stacked depthwise-convolution sequence
//! model needs: elementwise activations, layer normalization, softmax-scored
//! depthwise convolution, linear/matmul layers, embedding lookup, masked
//! pooling, cross-entropy, and a finite-difference gradient checker.
//!
//! Values are `f32` for training and inference and `f64` for gradient
//! checking; everything is generic over [`Scalar`]. A [`Tape`] records the
//! forward pass and replays it in reverse to accumulate gradients.

pub mod kernels;

mod check;
mod scalar;
mod tape;

pub use check::{grad_check, registered_op_checks, OpCheck};
pub use scalar::Scalar;
pub use tape::{Gradients, Tape, TensorError, TensorRef};
