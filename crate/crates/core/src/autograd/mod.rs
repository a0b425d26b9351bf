//! Reverse-mode automatic differentiation over dense tensors.

pub mod kernels;
mod tape;

pub use tape::{AttnMask, ConvGeom, Gradients, Tape, Var};
