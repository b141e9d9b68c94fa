//! Corpus ingestion, vocabulary and token layouts.

mod dataset;
mod sequence;
pub mod vocab;

pub use dataset::{load_dataset, read_dataset, write_dataset, DatasetReader, ExampleRecord};
pub use sequence::{encode_memory, encode_query, encode_target, encode_target_text, TokenSequence};
pub use vocab::{tokenize, Vocabulary};
