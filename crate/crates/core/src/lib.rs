//! Column vocabulary association: annotate table columns with controlled
//! vocabulary terms using only column metadata.
//!
//! Two matchers are provided. [`ranker`] embeds metadata and glossary entries
//! and retrieves the cosine top-k; [`llm`] prompts a chat-completions model
//! with the glossary as context. [`eval`] scores either against ground truth
//! with hit@1 and hit@5.

pub mod corpus;
pub mod embedding;
pub mod http;
pub mod ranker;
pub mod llm;
pub mod partition;
pub mod eval;
pub mod manifest;
pub mod mock;
