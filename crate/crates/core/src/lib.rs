//! Few-shot named entity recognition by metric learning.
//!
//! Token embeddings are mapped by a small two-layer network trained
//! episodically with a triplet objective whose per-type margins are learned.
//! At test time each entity type owns a ball around its mapped prototype;
//! tokens outside every ball are labeled O.

pub mod cli;
pub mod corpus;
pub mod data;
pub mod embedding;
pub mod error;
pub mod inference;
pub mod loss;
pub mod net;
pub mod rng;
pub mod sampler;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
