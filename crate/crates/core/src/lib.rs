//! Contrastive text embeddings: a mean-pooling lookup encoder trained with
//! InfoNCE or its `(1 - p⁺)`-weighted variant, benchmark builders for
//! retrieval and reranking, and the matching evaluation harness.

pub mod datasets;
pub mod encoder;
pub mod error;
pub mod evaluator;
pub mod jsonl;
pub mod objectives;
pub mod trainer;

pub use encoder::{build_vocab, tokenize, EmbeddingVector, ModelParams, Role, RowGradients, TokenSequence, Vocabulary};
pub use error::{Error, Result};
pub use objectives::{LossConfig, LossVariant, SimilarityScores};
