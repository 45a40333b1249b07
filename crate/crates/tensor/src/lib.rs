//! Dense NCHW tensors with a tape-based reverse-mode autodiff graph.
//!
//! The same model code runs against two executors through the [`Ops`] trait:
//! [`Eager`] evaluates immediately on [`Tensor`] values and keeps nothing
//! alive, while [`Graph`] records every operation so that
//! [`Graph::backward`] can produce gradients for the leaves.
//!
//! Convolutions and the separable filters are lowered onto
//! `matrixmultiply` GEMM kernels; everything else is plain loops.

mod error;
mod float;
mod graph;
pub mod kernels;
mod ops;
pub mod optim;
mod tensor;

pub use error::{Result, TensorError};
pub use float::Float;
pub use graph::{Gradients, Graph, Var};
pub use ops::{BatchStats, BnMode, Eager, Ops};
pub use tensor::Tensor;
