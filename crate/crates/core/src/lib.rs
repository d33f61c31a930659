//! Differentially private training with data-free Kronecker-factored
//! preconditioning.
//!
//! Per-sample gradients are transformed by frozen `F^{-1/2}` KFAC factors
//! estimated from synthetic probes, then clipped, summed, noised and
//! averaged. The crate also carries the Rényi-DP accountant and the spectral
//! diagnostics used to check that synthetic probes recover the network's
//! curvature.

// `!(x > 0.0)` is how validation rejects NaN alongside out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod container;
pub mod data;
pub mod diagnostics;
pub mod dp;
pub mod error;
pub mod kfac;
pub mod linalg;
pub mod nn;
pub mod par;
pub mod probes;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
