//! Minimal neural-network stack: a reverse-mode autodiff tape over dense f64
//! matrices, multilayer perceptrons with explicit input-gradient graphs, Adam,
//! and finite-difference checking utilities used throughout the test suites.
//!
//! All model math runs in f64. On-disk tensors are f32; conversion happens at
//! the checkpoint/dataset boundary.

mod adam;
mod fd;
mod mat;
mod mlp;
mod tape;

pub use adam::Adam;
pub use fd::{finite_diff_grad, max_rel_error};
pub use mat::Mat;
pub use mlp::{dropout_mask, Activation, BoundMlp, Mlp};
pub use tape::{ActKind, Tape, Var};
