//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Graphs are rebuilt for every evaluation: operations on a [`Graph`] compute
//! values immediately and record their local derivative rule, and
//! [`Graph::backward`] sweeps the recorded nodes in reverse. Learnable
//! tensors live in a [`ParamStore`] and enter a graph through
//! [`Graph::bind`]. [`AdamState`] updates a store from the gradients of a
//! sweep, and [`finite_diff_check`] compares any such gradient against
//! central differences.

// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod adam;
mod check;
mod error;
mod graph;
mod params;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use check::{evaluate_and_grad, finite_diff_check, GraphBuilder, ProbeOptions};
pub use error::{AutodiffError, Result};
pub use graph::{gaussian_log_pdf, sigmoid, softplus, BackwardMode, BoundParams, Gradients, Graph, Var, LOG_FLOOR};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
