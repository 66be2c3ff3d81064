//! Desk-scale laboratory for meta offline-online reinforcement learning.
//!
//! Everything here is sized so that exact answers are available: tabular
//! environments with closed-form occupancy measures and returns, hand-rolled
//! `f64` network primitives with analytic gradients, SAC-style agents built
//! on top of them, and the mixed-distribution performance bounds the agents
//! are checked against. A small CLI (`moorl`) drives dataset generation,
//! training, evaluation and bound verification.

pub mod analysis;
pub mod data;
pub mod envs;
pub mod meta;
pub mod nn;
pub mod rng;
pub mod sac;

mod error;

pub use error::{Error, Result};
