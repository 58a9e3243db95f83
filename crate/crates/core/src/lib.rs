//! Graph-guided generation of natural language explanations.
//!
//! The pipeline runs in four stages:
//!
//! 1. [`attribution`] turns attention captured from a label-only model into scored
//!    highlight explanations: single tokens, cross-part token pairs and span pairs.
//! 2. [`graphbuild`] keeps the top-k% of them and builds a token graph per instance.
//! 3. [`gnn`] aggregates encoder states over that graph; [`model`] inserts the layer
//!    three quarters of the way up the encoder of a sequence-to-sequence model.
//! 4. [`trainer`] fine-tunes the model to emit `label. explanation`, and [`evaluate`]
//!    measures how faithful and how close to human references the explanations are.

pub mod attribution;
pub mod dataset;
pub mod error;
pub mod evaluate;
pub mod extract;
pub mod gnn;
pub mod graphbuild;
pub mod model;
pub mod pipeline;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, Result};
