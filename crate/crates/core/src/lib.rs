//! Joint post-training of an autoregressive token policy and a VQ decoder on a
//! procedural image domain.
//!
//! A round samples token grids from the policy, scores their decodes with a
//! reward channel, takes a group-relative policy step, and then adapts the
//! decoder with a reward-ranked adversarial loss anchored to its pretraining
//! behaviour. Diagnostics track how far the policy's token statistics drift
//! from those of real images.

pub mod config;
pub mod decoder_stage;
pub mod diagnostics;
pub mod domain;
pub mod driver;
pub mod error;
pub mod grpo;
pub mod io;
pub mod params;
pub mod policy;
pub mod reward;
pub mod rng;
pub mod tokenizer;

pub use error::{CoevoError, Result};
