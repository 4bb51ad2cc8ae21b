//! Zero-shot matching through a chat-completions endpoint.
//!
//! No examples, ground truth or earlier answers ever enter a prompt: a
//! prompt is built only from the instructions, the column batch and the
//! candidate glossary.

mod client;
mod parse;
mod prompt;
mod run;

pub use client::{
    model_dir_name, BatchArchive, ChatClient, ChatEndpoint, ChatFailure, ConfigError, LlmRunConfig, LLM_API_KEY_ENV,
    LLM_URL_ENV,
};
pub use parse::{parse_llm_response, ParseError, ParsedResponse};
pub use prompt::{
    assistant_instructions, render_prompts, render_query, serialize_batch, serialize_glossary, PromptBundle,
    PromptError, Round, INPUT_METADATA_SLOT,
};
pub use run::{plan_batches, run_matching, Batch, BatchFailure, GlossaryScope, RunOutcome};
