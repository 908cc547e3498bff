//! Emotional-support response generation with retrieved demonstrations and
//! commonsense cognitive states fused into an encoder-decoder.
//!
//! The crate is organized bottom-up:
//!
//! - [`corpus`]: dialogue data, splits and the retrieval base
//! - [`text`]: tokenizer and vocabulary
//! - [`retrieval`]: embeddings, the exhaustive top-s index and demonstration assembly
//! - [`cognition`]: cognitive-state providers and the encoder/refiner/selector stack
//! - [`model`]: encoders, dual cross-attention, weighted fusion and the decoder
//! - [`sampling`]: repetition penalty, top-k and nucleus decoding
//! - [`training`]: example preparation, NLL, Adam and checkpoint selection
//! - [`metrics`]: BLEU, ROUGE-L, Distinct-n, accuracy, perplexity and normalized scoring
//! - [`pipeline`]: the artifact-producing commands behind the `esc` binary

pub mod autograd;
pub mod checkpoint;
pub mod cognition;
pub mod corpus;
pub mod error;
pub mod hash;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod retrieval;
pub mod sampling;
pub mod synthetic;
pub mod text;
pub mod training;

pub use error::{Error, Result};
