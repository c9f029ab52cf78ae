//! Causal upper-bound potentials for reward shaping from confounded offline
//! data: tabular and neural bounds, potential-based shaping, online learners
//! and conditional-independence diagnostics.

// Negated comparisons reject NaN in validation code; numeric kernels index
// several parallel arrays.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod agent;
pub mod cmdp;
pub mod data;
pub mod diagnostics;
pub mod envs;
pub mod error;
pub mod linalg;
pub mod nn;
pub mod par;
pub mod potential;
pub mod report;
pub mod shaping;
pub mod solver;

pub use error::{Error, Result};
