//! Latent thought augmentation for a frozen toy causal LM.
//!
//! The crate trains a small randomly initialized generator block to produce
//! latent thought vectors that are injected into the input of a frozen
//! decoder-only language model, under a joint objective of supervised
//! fine-tuning cross-entropy, a semantic alignment KL term, and a reasoning
//! focus InfoNCE term. A numerical lab validates the distributional
//! variance and KL orderings that motivate the design.

pub mod backbone;
pub mod block;
pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod generator;
pub mod objectives;
pub mod optim;
pub mod tape;
pub mod trainer;
pub mod variance_lab;

pub use error::{Error, Result};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Deterministic RNG on an independent stream, so indexed work items can be
/// generated in parallel without sharing generator state.
pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream.into());
    rng
}
