//! Multi-level Monte Carlo estimation of `E[f(X(T))]` for SDEs with
//! superlinearly growing coefficients, using the truncated Euler-Maruyama
//! scheme on each level.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod cli;
pub mod error;
pub mod mlmc;
pub mod schemes;
pub mod sde_core;

pub use error::{Error, Result};
