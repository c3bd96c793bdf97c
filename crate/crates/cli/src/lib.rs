//! Command-line pipeline around the `pggm` library: simulate replications,
//! fit estimators, evaluate fits, and run the full comparison.

// `!(x > 0.0)` is how NaN-rejecting checks are written throughout.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod error;
pub mod layout;
pub mod pipeline;
