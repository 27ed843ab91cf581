//! Dense row-major tensors with a recording tape for reverse-mode
//! differentiation.
//!
//! The tape records one forward pass. Parameters enter the tape through
//! [`Tape::param`] and come back out of [`Tape::backward`] as a [`Grads`]
//! table indexed by [`ParamId`]. Everything is single-threaded and
//! deterministic for a fixed seed.

mod error;
mod kernels;
mod params;
mod real;
mod tape;
mod tensor;

pub mod checkpoint;
pub mod rng;

pub use error::{Result, TensorError};
pub use params::{Grads, ParamId, ParamStore};
pub use real::Real;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
