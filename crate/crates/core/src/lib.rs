//! Unsupervised bilingual lexicon induction through synthetic parallel data.

pub mod aligner;
pub mod corpus;
pub mod decoder;
pub mod embeddings;
pub mod error;
pub mod eval;
pub mod lexicon;
pub mod lm;
pub mod phrases;
pub mod pipeline;
pub mod retrieval;
pub mod tuner;

pub use error::{Error, Result};
