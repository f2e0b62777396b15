//! Plug-and-play inverse problem solver built around a stochastic
//! auto-encoder defined by a consistency model.
//!
//! The sampler alternates an encode / consistency-decode step, which leaves
//! the prior invariant, with an exact proximal step on the data fidelity.
//! An outer stochastic-approximation loop calibrates the conditioning
//! vector by maximum marginal likelihood.

pub mod equiv_hr;
pub mod error;
pub mod fft;
pub mod harness;
pub mod operators;
pub mod proximal;
pub mod sae;
pub mod sampler;
pub mod sapg;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
