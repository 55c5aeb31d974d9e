//! Desk-scale instantiation of the full pipeline: a synthetic scene corpus,
//! two-stream encoders with one fusion block, the five-term training loop,
//! its evaluation probes, and checkpointing.

pub mod checkpoint;
pub mod corpus;
pub mod encoders;
pub mod eval;
pub mod train;

pub use checkpoint::Checkpoint;
pub use corpus::{generate_toy_corpus, ObjectGroup, ToyCorpus, ToyScene, N_SYMBOLS};
pub use encoders::{EncodeError, EncodedPair, ModelConfig, Params, ToyEncoders};
pub use eval::{eval_retrieval, eval_rlm, RetrievalReport, RlmReport};
pub use train::{
    composite_grad_check, full_grad_check, train_run, MetricsRecord, TrainConfig, TrainError,
    TrainOutcome, TrainResources,
};
