//! Computational machinery for bi-parameter square functions on dyadic
//! product grids.
//!
//! The crate is `no_std` and only needs `alloc`. Everything here is a pure
//! function of its inputs: random grids are drawn from counter-based streams
//! keyed by `(seed, index)`, so any experiment is reproducible regardless of
//! how the caller schedules work.
//!
//! Module map:
//!
//! * [`dyadic`]: random dyadic grids, cube navigation, goodness, the
//!   `A_{I1 I2}` coefficient and Monte-Carlo estimates of the good-cube
//!   probability.
//! * [`haar`]: mesh functions, Haar functions, product Haar transforms,
//!   martingale differences and the `s^k_I` corrections.
//! * [`kernel`]: bi-parameter kernels and their action on mesh functions.
//! * [`verify`]: empirical constants for the kernel assumptions.
//! * [`engine`]: Whitney quadrature of the square function, the averaging
//!   identity, the term decomposition, the Schur bound and the Carleson
//!   number checks.
//! * [`journe`]: strong maximal functions, shadows of open sets, maximal
//!   cube families, 2-maximal rectangles and Journé's lemma.
#![cfg_attr(not(test), no_std)]
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

extern crate alloc;

pub mod dyadic;
pub mod engine;
mod error;
pub mod haar;
pub mod journe;
pub mod kernel;
pub mod linalg;
pub(crate) mod math;
pub mod rng;
pub mod verify;

pub use error::{Error, Result};
