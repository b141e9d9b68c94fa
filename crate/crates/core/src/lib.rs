//! Retrieval-augmented multi-document summarization.
//!
//! A query encoder searches a knowledge base of unit-norm document
//! embeddings; the top candidates are re-encoded and fed, together with the
//! encoded source documents, to a decoder whose output distribution mixes a
//! vocabulary softmax with a copy distribution over candidate tokens.

pub mod config;
pub mod decode;
pub mod encoder;
pub mod error;
pub mod generator;
pub mod index;
pub mod layers;
pub mod math;
pub mod model;
pub mod retrieve;
pub mod text;
pub mod train;

pub use config::PipelineConfig;
pub use error::{Error, Result};
pub use model::{Model, ModelConfig};
