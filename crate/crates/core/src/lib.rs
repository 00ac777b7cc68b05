//! Logit-layer debiasing for layered language models.
//!
//! A model is anything implementing [`model::LayeredModel`]: the built-in
//! [`model::ToyModel`] or an external process speaking the line-delimited
//! JSON protocol in [`model::protocol`]. On top of it:
//!
//! * [`lens`] reads interior layers through the unembedding, traces the
//!   divergence between a with-context and a without-context pass, and
//!   extracts the context's bias vector at the critical layer.
//! * [`decode`] runs constrained top-K generation with the static contrast
//!   correction, the semantic-aware dynamic penalty, or a hidden-state
//!   steering baseline.
//! * [`bench`] scores forced-choice A/B/C datasets and sweeps γ.
//! * [`synthetic`] builds toy models whose critical layer and biased answer
//!   are known in advance.

pub mod bench;
pub mod decode;
pub mod error;
pub mod lens;
pub mod model;
pub mod numerics;
pub mod synthetic;

pub use error::{Error, Result};
