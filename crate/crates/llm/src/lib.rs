//! Turns a task description into a [`GuidanceSet`] by asking an
//! OpenAI-compatible chat-completions endpoint for `(state, action, q)`
//! triples, then range-checks the answer against the environment.

mod client;
mod prompt;
mod sanitize;

pub use client::{extract_triples, LlmClient, LlmEndpoint, ENV_API_KEY, ENV_BASE_URL};
pub use prompt::{build_prompt, PromptTemplate, FEEDBACK_HEADER, OUTPUT_SCHEMA, PLACEHOLDERS};
pub use sanitize::{sanitize_guidance, Sanitized};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("template is missing placeholder {{{0}}}")]
    MissingPlaceholder(&'static str),

    #[error("template: {0}")]
    Template(String),

    #[error("endpoint config: {0}")]
    Config(String),

    /// The endpoint answered with a status that retrying will not fix.
    #[error("endpoint returned HTTP {status}: {body}")]
    Http { status: u16, body: String },

    #[error("guidance unavailable after {attempts} requests: {last_error}")]
    Unavailable { attempts: u32, last_error: String },
}

pub type Result<T, E = LlmError> = std::result::Result<T, E>;
