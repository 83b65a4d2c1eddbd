//! Knowledge-embedded representation learning for fine-grained recognition.
//!
//! The pipeline builds a weighted category–attribute graph, runs a gated graph
//! neural network over it to get a knowledge vector, and uses that vector to
//! gate per-location compact bilinear image features before classification.

pub mod cbp;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod fusion;
pub mod ggnn;
pub mod gradcheck;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod regions;
pub mod trainer;

pub use error::{KerlError, Result};
