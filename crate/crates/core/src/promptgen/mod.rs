//! Turn-taking prompts: statistics, templates, LLM exchange and embeddings.

pub mod embed;
pub mod format;
pub mod llm;
pub mod record;
pub mod templates;

pub use embed::{cosine, embed_text, load_embeddings, store_embeddings};
pub use format::{parse_llm_response, ParticipantPrompt, PromptPair};
pub use llm::{
    build_llm_request, call_llm, call_llm_with_key, llm_prompts, LlmEndpoint, LlmRequest,
};
pub use record::{compute_stats, ParticipantStats, TimingRecord, TurnStats};
pub use templates::{prompt_for_traits, template_prompts, traits, Speed, Traits};
