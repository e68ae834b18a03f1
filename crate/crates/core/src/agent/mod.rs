//! Uniform request/reply envelope between pipeline stages and model backends.
//!
//! Every stage talks to a [`Backend`] through [`generate`], which validates
//! the request, enforces the input-token cap and times the call. Two
//! backends ship: [`ScriptedBackend`] for deterministic offline runs and
//! [`LiveBackend`] for OpenAI-compatible chat-completion endpoints.

mod live;
mod scripted;

use std::fmt;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::ImageRef;

pub use live::{LiveBackend, LiveBackendConfig, ENV_API_BASE, ENV_API_KEY};
pub use scripted::{Responder, Script, ScriptRule, ScriptedBackend, ScriptedCall};

pub const DEFAULT_TEMPERATURE: f64 = 0.75;
pub const DEFAULT_MAX_INPUT_TOKENS: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Summarizer,
    #[serde(rename = "vision_qa")]
    VisionQa,
    Judge,
    Clozer,
}

impl Role {
    pub const ALL: [Role; 4] = [Role::Summarizer, Role::VisionQa, Role::Judge, Role::Clozer];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Summarizer => "summarizer",
            Role::VisionQa => "vision_qa",
            Role::Judge => "judge",
            Role::Clozer => "clozer",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub temperature: f64,
    pub max_input_tokens: usize,
    pub model_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl GenerationParams {
    pub fn new(model_id: impl Into<String>) -> Self {
        GenerationParams {
            temperature: DEFAULT_TEMPERATURE,
            max_input_tokens: DEFAULT_MAX_INPUT_TOKENS,
            model_id: model_id.into(),
            seed: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(Error::invalid("temperature", format!("{} outside [0, 2]", self.temperature)));
        }
        if self.max_input_tokens == 0 {
            return Err(Error::invalid("max_input_tokens", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentRequest {
    pub role: Role,
    pub prompt: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<ImageRef>,
    pub params: GenerationParams,
}

impl AgentRequest {
    pub fn text(role: Role, prompt: impl Into<String>, params: GenerationParams) -> Self {
        AgentRequest { role, prompt: prompt.into(), image: None, params }
    }

    pub fn vision(prompt: impl Into<String>, image: Option<ImageRef>, params: GenerationParams) -> Self {
        AgentRequest { role: Role::VisionQa, prompt: prompt.into(), image, params }
    }

    pub fn validate(&self) -> Result<()> {
        if self.prompt.trim().is_empty() {
            return Err(Error::EmptyPrompt);
        }
        match (self.role, &self.image) {
            (Role::VisionQa, None) => return Err(Error::ImageMissing),
            (Role::VisionQa, Some(_)) => {}
            (_, Some(_)) => return Err(Error::UnexpectedImage),
            (_, None) => {}
        }
        self.params.validate()
    }

    pub fn prompt_hash(&self) -> String {
        prompt_hash(&self.prompt)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentReply {
    pub text: String,
    pub model_id: String,
    pub latency_ms: u64,
    pub truncated: bool,
}

/// A text or vision model endpoint.
///
/// Implementations receive requests that already passed validation and
/// truncation; they only produce text.
pub trait Backend: Send + Sync {
    fn name(&self) -> &str;

    fn complete(&self, request: &AgentRequest) -> Result<String>;
}

/// A backend bound to the generation parameters of one role.
#[derive(Clone)]
pub struct Agent {
    pub backend: std::sync::Arc<dyn Backend>,
    pub params: GenerationParams,
}

impl fmt::Debug for Agent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Agent").field("backend", &self.backend.name()).field("params", &self.params).finish()
    }
}

impl Agent {
    pub fn new(backend: std::sync::Arc<dyn Backend>, params: GenerationParams) -> Self {
        Agent { backend, params }
    }

    pub fn ask(&self, role: Role, prompt: impl Into<String>) -> Result<AgentReply> {
        generate(&AgentRequest::text(role, prompt, self.params.clone()), self.backend.as_ref())
    }

    pub fn ask_vision(&self, prompt: impl Into<String>, image: Option<ImageRef>) -> Result<AgentReply> {
        generate(&AgentRequest::vision(prompt, image, self.params.clone()), self.backend.as_ref())
    }
}

/// Validates, truncates to the token cap, and dispatches to `backend`.
pub fn generate(request: &AgentRequest, backend: &dyn Backend) -> Result<AgentReply> {
    request.validate()?;
    let (prompt, truncated) = truncate_to_tokens(&request.prompt, request.params.max_input_tokens);
    if truncated {
        log::debug!(
            "{} prompt truncated from {} to {} approximate tokens",
            request.role,
            approximate_token_count(&request.prompt),
            approximate_token_count(prompt)
        );
    }
    let capped;
    let request = if truncated {
        capped = AgentRequest { prompt: prompt.to_string(), ..request.clone() };
        &capped
    } else {
        request
    };
    let started = Instant::now();
    let text = backend.complete(request)?;
    Ok(AgentReply { text, model_id: request.params.model_id.clone(), latency_ms: started.elapsed().as_millis() as u64, truncated })
}

/// `ceil(words * 4 / 3)` over whitespace-delimited words.
pub fn approximate_token_count(text: &str) -> usize {
    let words = text.split_whitespace().count();
    (words * 4).div_ceil(3)
}

/// Drops words from the tail until the prompt fits `max_tokens`. The kept
/// prefix is a byte slice of the original, so whitespace inside it survives.
pub fn truncate_to_tokens(prompt: &str, max_tokens: usize) -> (&str, bool) {
    if approximate_token_count(prompt) <= max_tokens {
        return (prompt, false);
    }
    // largest w with ceil(4w/3) <= max_tokens
    let keep_words = max_tokens * 3 / 4;
    if keep_words == 0 {
        return ("", true);
    }
    let mut end = 0;
    let mut seen = 0;
    let mut in_word = false;
    for (i, ch) in prompt.char_indices() {
        if ch.is_whitespace() {
            if in_word {
                in_word = false;
                seen += 1;
                if seen == keep_words {
                    break;
                }
            }
        } else {
            in_word = true;
            end = i + ch.len_utf8();
        }
    }
    (&prompt[..end], true)
}

pub fn prompt_hash(prompt: &str) -> String {
    hex::encode(Sha256::digest(prompt.as_bytes()))
}
