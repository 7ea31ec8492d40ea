//! Core library for a three-stage detection-network compression pipeline:
//! dynamic sparse training of batch-norm scale factors, grouped channel
//! pruning with voted shortcut masks, and spatial attention distillation.
//!
//! The crates/cli binary drives these modules; everything here is plain
//! CPU code with `f64` arithmetic and seeded, reproducible randomness.

pub mod detectcore;
pub mod distill;
pub mod engine;
pub mod netgraph;
pub mod network;
pub mod gradcheck;
pub mod groupprune;
pub mod rng;
pub mod sparsetrain;
pub mod tensor;
pub mod trainer;
