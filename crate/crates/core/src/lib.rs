//! Socially-aware sequential recommendation with a temporally-causal
//! transformer decoder, its per-student and item-KNN baselines, a synthetic
//! classroom cohort generator, and an offline evaluation harness.

pub mod corpus;
pub mod evalharness;
pub mod knnrec;
pub mod model;
pub mod numkernel;
pub mod pipeline;
pub mod rng;
pub mod synthgen;
