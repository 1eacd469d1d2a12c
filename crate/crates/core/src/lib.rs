//! Numerical core for evaluating the safety of small image classifiers:
//! tensors with reverse-mode autodiff, model definitions, adversarial
//! attacks, interval and linear-relaxation certification, gradient
//! attributions and the scalar metrics built on them.
//!
//! The crate is `no_std` (with `alloc`); file formats, configuration and the
//! command-line front end live in the `robusta` crate.
#![cfg_attr(not(feature = "std"), no_std)]
// `!(x >= 0.0)` is used on purpose: it rejects NaN along with negatives.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod attack;
pub mod attribution;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod real;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use model::{Architecture, Layer, Model};
pub use real::Real;
pub use tensor::Tensor;
