//! Domain-generalizable knowledge tracing.
//!
//! Multi-source training with per-domain concept embeddings, k-means
//! concept prototypes, sequence instance normalization and relation-aware
//! attention, plus the data, evaluation and checkpoint plumbing around them.

pub mod aggregation;
pub mod autograd;
pub mod data;
pub mod dataset;
pub mod decoder;
pub mod embedding;
pub mod encoders;
pub mod error;
pub mod metrics;
pub mod model;
pub mod params;
pub mod pipeline;
pub mod presets;
pub mod rng;
pub mod seqin;
pub mod synth;

pub use error::{Error, Result};
