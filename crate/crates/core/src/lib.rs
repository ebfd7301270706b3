//! Affect analysis for tweets: tokenization, skip-gram embeddings, affective
//! lexicon expansion, a BiLSTM encoder with deep self-attention trained with
//! transfer learning, classical baselines and evaluation tooling.

pub mod baselines;
pub mod cli;
pub mod container;
pub mod datasets;
pub mod embeddings;
pub mod error;
pub mod evaluation;
pub mod grad;
pub mod lexicon;
pub mod model;
pub mod text;
pub mod training;

pub use error::{Error, Result};
