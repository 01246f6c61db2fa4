//! Exemplar-guided abstractive summarization: a multi-head contrastive dense
//! retriever finds reference summaries for a document, and a small
//! encoder-decoder consumes them through sentence-group tags and
//! ROUGE-guided beam search.

pub mod corpus;
pub mod decoder;
pub mod error;
pub mod evalharness;
pub mod fuzzing;
pub mod jsonl;
pub mod metrics;
pub mod pipeline;
pub mod retriever;
pub mod summarizer;
pub mod tensor;

pub use error::{Error, Result};
