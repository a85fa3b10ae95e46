//! Block-adapted primal-dual proximal splitting for problems
//! `min_x G(x) + F(K(x))` with a non-linear operator `K`.
//!
//! The primal and dual spaces are split into coordinate blocks. Primal or
//! dual blocks may be updated at random, with step lengths and testing
//! parameters tied together by the coupling rules in [`stepper`].

pub mod blocks;
pub mod diagnostics;
mod error;
pub mod models;
pub mod problem;
pub mod sampling;
pub mod solvers;
pub mod stepper;

pub use error::{Error, Result};
