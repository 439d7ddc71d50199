//! Injectivity lab for causal decoder-only transformers.
//!
//! The [`model`] module implements the architecture; [`autograd`] and
//! [`training`] differentiate and train it with plain gradient descent;
//! [`probe`] holds collision scans, margins, witness constructions and the
//! Hessian check; [`sipit`] recovers prompts from hidden states.

pub mod autograd;
pub mod error;
pub mod model;
pub mod numerics;
pub mod probe;
pub mod sipit;
pub mod training;

pub use error::{Error, Result};
