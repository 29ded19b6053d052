//! Desk-scale end-to-end trainable retrieval-augmented relation extraction.
//!
//! The crate is organised bottom-up:
//!
//! - [`autodiff`]: reverse-mode differentiation over dense matrices.
//! - [`corpus`]: instances, vocabulary, schema, JSONL ingestion and the
//!   seeded synthetic task generator.
//! - [`encoder`]: the retrieval-side encoder producing `L×N` instance
//!   embeddings.
//! - [`retriever`]: averaged cosine distance, differentiable k-nearest
//!   selection, hard/random baselines and subset sampling.
//! - [`generator`]: soft prompts, the toy seq2seq relation generator and
//!   trie-constrained beam decoding.
//! - [`pipeline`]: the assembled model and the query → prompt → decode
//!   path shared by training and inference.
//! - [`training`]: loss, AdamW, warm-up, early stopping, checkpoints and
//!   ablation wiring.
//! - [`gradcheck`]: backward gradients against central finite differences.
//! - [`evalx`]: micro-F1, k-sweeps and retrieved-instance statistics.

pub mod autodiff;
pub mod matrix;

pub use matrix::Matrix;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod generator;
pub mod gradcheck;
pub mod params;
pub mod pipeline;
pub mod retriever;
pub mod seed;

pub use error::{Error, Result};
pub mod evalx;
pub mod training;
