//! A compact tape-based reverse-mode automatic differentiation engine.
//!
//! Values are dense row-major `f32` tensors. A [`Graph`] records every
//! operation applied to [`Var`] handles; [`Graph::backward`] walks the tape in
//! reverse and returns gradients for every node that requires them.
//!
//! Image-like tensors use `[C, H, W]` layout (batch size is always one) and
//! point-like tensors use `[N, C]`.
//!
//! Domain crates extend the engine through [`Graph::custom`], which takes an
//! already computed output and a backward closure.

#![allow(clippy::too_many_arguments, clippy::needless_range_loop)]

mod conv;
mod graph;
mod norm;
mod ops;
mod optim;
mod params;
mod sparse;
mod tensor;

pub use graph::{BackCtx, BackwardFn, Gradients, Graph, Var};
pub use optim::{AdamW, AdamWConfig};
pub use params::{ParamId, ParamStore, Session};
pub use sparse::{Rulebook, SparseRows};
pub use tensor::Tensor;

pub mod gradcheck;
