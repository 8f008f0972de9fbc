//! Traffic model, cache planner and virtual-GPU simulator for persistent-kernel
//! iterative solvers (stencils and conjugate gradient).

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cg;
pub mod cli;
pub mod device;
pub mod error;
pub mod model;
pub mod planner;
pub mod reference;
pub mod sim;
pub mod stencil;

pub use error::{Error, Result};
