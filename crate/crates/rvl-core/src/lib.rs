//! Desk-scale pipeline for vision-language pretraining with refined objectives.
//!
//! The crate covers the full data and loss path: a WordNet database loader
//! ([`wordnet`]), rule-based tagging and lemmatization ([`linguistics`]),
//! homonym sentence rewriting ([`rewriter`]), WordPiece tokenization and
//! masking ([`tokenizer`]), the five training objectives with analytic
//! gradients ([`losses`]), and a toy two-stream model small enough to verify
//! end to end with finite differences ([`toymodel`]).

pub mod linguistics;
pub mod losses;
pub mod resources;
pub mod rewriter;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod tokenizer;
pub mod toymodel;
pub mod wordnet;

pub use tensor::Tensor;
