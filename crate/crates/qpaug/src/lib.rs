//! Open-domain question answering with LLM-based question and passage
//! augmentation.
//!
//! The pipeline retrieves passages from a corpus by maximum inner-product
//! search, optionally augments the query with LLM-written sub-questions
//! before retrieval, optionally asks the LLM to self-generate a supporting
//! passage (guarded by a `[NONE]` refusal rule), and reads the final answer
//! from a prompt combining both knowledge sources. Baselines (no retrieval,
//! zero-shot CoT, vanilla RAG) and single-component ablations run through
//! the same orchestration.
//!
//! Modules:
//! - [`corpus`]: passage corpora and QA benchmark ingestion
//! - [`embed`]: embedding providers (mock, precomputed file, remote HTTP)
//! - [`vindex`]: exact top-K inner-product search over passage vectors
//! - [`llm`]: chat-completion client with greedy decoding, on-disk cache,
//!   and a deterministic scripted mock
//! - [`prompts`]: byte-exact prompt templates
//! - [`pipeline`]: per-question and per-dataset orchestration
//! - [`metrics`]: answer normalization, token F1, Rouge-L, Answer Recall@K

pub mod corpus;
pub mod embed;
pub mod llm;
pub mod metrics;
pub mod pipeline;
pub mod prompts;
pub mod vindex;

pub use corpus::{Passage, PassageStore, QAExample};
pub use embed::{EmbeddingProvider, Vector};
pub use llm::{LlmBackend, LlmClient, LlmRequest};
pub use pipeline::{PipelineDeps, PipelineMode, PipelineRecord};
pub use prompts::{PromptKind, Prompts};
pub use vindex::{ScoredHit, VectorIndex};
