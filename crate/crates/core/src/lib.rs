//! Flow-based stochastic policies trained with soft actor-critic.
//!
//! The velocity field of a K-step flow rollout comes in three
//! parameterizations ([`velocity::VelocityKind`]): a plain MLP, a gated
//! (GRU-style) update and a small transformer decoder. A noise-augmented
//! rollout ([`rollout`]) makes every step a Gaussian transition, so the
//! joint path density is available in closed form and serves as the
//! entropy term of the SAC losses ([`sac`]).

// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod diagnostics;
pub mod envs;
pub mod error;
pub mod gradcheck;
pub mod nets;
pub mod rollout;
pub mod sac;
pub mod velocity;

pub use error::{Error, Result};

/// Random number generator used throughout; its full state can be saved.
pub type SacRng = rand_chacha::ChaCha8Rng;
