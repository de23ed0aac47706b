//! Task-specification-to-policy-weights generation.
//!
//! A frozen instruction encoder ([`lang`]) feeds a hypernetwork
//! ([`hypernet`]) that emits the complete parameter vector of a small
//! visuomotor controller ([`policy`]). Entangled and hypernetwork baselines
//! live in [`baselines`]; [`sim`] provides the pick-and-place benchmark,
//! [`train`] the behavior-cloning loop, [`eval`] the evaluation and
//! few-shot adaptation protocols, and [`analysis`] the parameter-manifold
//! and timing measurements.

pub mod analysis;
pub mod baselines;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod hypernet;
pub mod lang;
pub mod model;
pub mod nn;
pub mod par;
pub mod pipeline;
pub mod policy;
pub mod seed;
pub mod sim;
pub mod tensor;
pub mod train;

pub use error::{DiscError, Result};
