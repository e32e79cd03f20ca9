//! Building blocks for training and evaluating explanation-augmented rerankers:
//! corpus formats, balanced pair sampling, few-shot explanation prompts, a
//! cached chat-completions client, dataset augmentation and export, reranking
//! through a scorer service, and trec_eval-compatible nDCG reporting.

pub mod corpus_io;
pub mod rng;
pub mod sampler;
pub mod llm;
pub mod prompt;
pub mod augment;
pub mod eval;
pub mod rerank;
#[cfg(feature = "mock-server")]
pub mod mock;
