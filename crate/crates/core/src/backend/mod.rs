//! Pluggable MLLM access.
//!
//! [`Backend`] is the narrow contract the detector talks to. Three
//! implementations ship: [`OpenAiCompatClient`] speaks the chat-completions
//! wire protocol with token log-probabilities, [`ScriptedBackend`] answers
//! from a rule file, and [`SimulatedMllm`] answers simulated observations
//! with a configurable accuracy profile.

mod openai;
mod scripted;
mod simulated;

use std::path::Path;

use base64::Engine as _;
use serde::{Deserialize, Serialize};

use crate::domain::{Observation, ObservationContent, Subtask};
use crate::prompting::StrategyKind;
use crate::uncertainty::{Method, OptionProb};

pub use openai::{LiveConfig, OpenAiCompatClient};
pub use scripted::{RuleMatcher, ScriptedBackend, ScriptedRule};
pub use simulated::{AccuracyBucket, SimulatedMllm, SimulatedMllmConfig};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BackendError {
    #[error("transport: {0}")]
    Transport(String),
    #[error("rate limited")]
    RateLimited,
    #[error("malformed response: {0}")]
    ProtocolMismatch(String),
    #[error("no scripted rule matched the request")]
    NoRuleMatched,
    #[error("backend does not return token log-probabilities; use the self_explained method")]
    LogprobsUnsupported,
    #[error("HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("backend unreachable: {0}")]
    Unreachable(String),
}

impl BackendError {
    pub(crate) fn is_retryable(&self) -> bool {
        matches!(self, BackendError::Transport(_) | BackendError::RateLimited)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChatRole {
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: ChatRole,
    pub text: String,
    /// Whether the observation payload goes into this message.
    #[serde(default)]
    pub attach_observation: bool,
}

impl ChatMessage {
    pub fn user(text: impl Into<String>, attach_observation: bool) -> Self {
        Self {
            role: ChatRole::User,
            text: text.into(),
            attach_observation,
        }
    }

    pub fn assistant(text: impl Into<String>) -> Self {
        Self {
            role: ChatRole::Assistant,
            text: text.into(),
            attach_observation: false,
        }
    }
}

/// Observation bytes as they go on the wire.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ObservationPayload {
    Image { media_type: String, data_base64: String },
    Text { text: String },
}

impl ObservationPayload {
    /// Images become base64 payloads (reading the file if `image_ref` is a
    /// path); simulated states become fenced JSON text.
    pub fn from_observation(obs: &Observation) -> Result<Self, BackendError> {
        match &obs.content {
            ObservationContent::SimState { sim_state } => {
                let json = serde_json::to_string_pretty(sim_state)
                    .map_err(|e| BackendError::InvalidRequest(e.to_string()))?;
                Ok(ObservationPayload::Text {
                    text: format!("Current environment state:\n```json\n{json}\n```"),
                })
            }
            ObservationContent::Image { image_ref } => image_payload(image_ref),
        }
    }

    pub fn data_url(&self) -> Option<String> {
        match self {
            ObservationPayload::Image {
                media_type,
                data_base64,
            } => Some(format!("data:{media_type};base64,{data_base64}")),
            ObservationPayload::Text { .. } => None,
        }
    }
}

fn image_payload(image_ref: &str) -> Result<ObservationPayload, BackendError> {
    if let Some(rest) = image_ref.strip_prefix("data:") {
        let (media_type, data) = rest
            .split_once(";base64,")
            .ok_or_else(|| BackendError::InvalidRequest("data URL is not base64".into()))?;
        return Ok(ObservationPayload::Image {
            media_type: media_type.to_string(),
            data_base64: data.to_string(),
        });
    }
    let path = Path::new(image_ref);
    if path.is_file() {
        let bytes = std::fs::read(path)
            .map_err(|e| BackendError::InvalidRequest(format!("{}: {e}", path.display())))?;
        let media_type = match path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .as_deref()
        {
            Some("jpg" | "jpeg") => "image/jpeg",
            Some("webp") => "image/webp",
            Some("gif") => "image/gif",
            _ => "image/png",
        };
        return Ok(ObservationPayload::Image {
            media_type: media_type.to_string(),
            data_base64: base64::engine::general_purpose::STANDARD.encode(bytes),
        });
    }
    if base64::engine::general_purpose::STANDARD
        .decode(image_ref.trim())
        .is_ok()
    {
        return Ok(ObservationPayload::Image {
            media_type: "image/png".to_string(),
            data_base64: image_ref.trim().to_string(),
        });
    }
    Err(BackendError::InvalidRequest(format!(
        "image_ref {image_ref:?} is neither a file, a data URL, nor base64"
    )))
}

/// Structured context travelling alongside a request. Never sent on the
/// wire; scripted and simulated backends match on it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryContext {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_id: Option<String>,
    pub strategy: StrategyKind,
    pub method: Method,
    pub subtask: Subtask,
    pub executed_index: usize,
    pub observation: Observation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendRequest {
    pub messages: Vec<ChatMessage>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observation: Option<ObservationPayload>,
    pub want_logprobs: bool,
    pub top_logprobs: u8,
    pub model_name: String,
    pub max_tokens: u32,
    pub temperature: f32,
    /// Option tokens expected in the reply; empty for free-text exchanges
    /// such as the SRA analysis turn.
    #[serde(default)]
    pub answer_options: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context: Option<QueryContext>,
}

impl BackendRequest {
    pub fn validate(&self) -> Result<(), BackendError> {
        if self.messages.is_empty() {
            return Err(BackendError::InvalidRequest("no messages".into()));
        }
        if self.want_logprobs && (self.top_logprobs as usize) < self.answer_options.len() {
            return Err(BackendError::InvalidRequest(format!(
                "top_logprobs {} below option count {}",
                self.top_logprobs,
                self.answer_options.len()
            )));
        }
        Ok(())
    }

    /// Text of the last user message.
    pub fn last_user_text(&self) -> &str {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == ChatRole::User)
            .map(|m| m.text.as_str())
            .unwrap_or("")
    }

    pub fn is_free_text(&self) -> bool {
        self.answer_options.is_empty()
    }
}

/// Request knobs that do not come from the prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestSettings {
    pub model_name: String,
    pub max_tokens: u32,
    pub temperature: f32,
    pub top_logprobs: u8,
}

impl Default for RequestSettings {
    fn default() -> Self {
        Self {
            model_name: "llava".to_string(),
            max_tokens: 256,
            temperature: 0.0,
            top_logprobs: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alternative {
    pub token: String,
    pub logprob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogprob {
    pub token: String,
    pub logprob: f64,
    #[serde(default)]
    pub alternatives: Vec<Alternative>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendReply {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_logprobs: Option<Vec<TokenLogprob>>,
    pub model_name: String,
    pub latency_ms: u64,
}

pub trait Backend: Send + Sync {
    fn complete(&self, req: &BackendRequest) -> Result<BackendReply, BackendError>;

    /// Cheap reachability probe used before starting an episode.
    fn health_check(&self) -> Result<(), BackendError> {
        Ok(())
    }
}

impl<B: Backend + ?Sized> Backend for std::sync::Arc<B> {
    fn complete(&self, req: &BackendRequest) -> Result<BackendReply, BackendError> {
        (**self).complete(req)
    }

    fn health_check(&self) -> Result<(), BackendError> {
        (**self).health_check()
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ExtractError {
    #[error("reply carries no token log-probabilities")]
    MissingLogprobs,
    #[error("no token position mentions an answer option")]
    NoAnswerPosition,
}

fn normalize_token(token: &str) -> String {
    token
        .trim()
        .trim_start_matches(['Ġ', '▁'])
        .trim()
        .to_lowercase()
}

/// Index of the first option `token` stands for: an exact match after case
/// and whitespace normalization, or a proper prefix of the option (tokenizers
/// split words like "Yes" inconsistently).
fn match_option(token: &str, normalized_options: &[String]) -> Option<usize> {
    let t = normalize_token(token);
    if t.is_empty() {
        return None;
    }
    normalized_options
        .iter()
        .position(|o| *o == t)
        .or_else(|| normalized_options.iter().position(|o| o.starts_with(&t)))
}

/// Locates the answer position (the first position whose sampled token or
/// alternatives name an option) and returns the option masses there. Options
/// absent at that position get probability zero.
pub fn extract_option_distribution(
    reply: &BackendReply,
    options: &[String],
) -> Result<Vec<OptionProb>, ExtractError> {
    let positions = reply
        .token_logprobs
        .as_ref()
        .ok_or(ExtractError::MissingLogprobs)?;
    let normalized: Vec<String> = options.iter().map(|o| normalize_token(o)).collect();
    for pos in positions {
        let mut seen: Vec<&str> = Vec::new();
        let mut mass = vec![0.0f64; options.len()];
        let mut hit = false;
        let candidates = std::iter::once((pos.token.as_str(), pos.logprob))
            .chain(pos.alternatives.iter().map(|a| (a.token.as_str(), a.logprob)));
        for (token, logprob) in candidates {
            if seen.contains(&token) {
                continue;
            }
            seen.push(token);
            if let Some(i) = match_option(token, &normalized) {
                hit = true;
                if logprob.is_finite() {
                    mass[i] += logprob.exp().clamp(0.0, 1.0);
                }
            }
        }
        if hit {
            let total: f64 = mass.iter().sum();
            if total > 1.0 {
                mass.iter_mut().for_each(|m| *m /= total);
            }
            return Ok(options
                .iter()
                .zip(mass)
                .map(|(o, p)| OptionProb::new(o.clone(), p.clamp(0.0, 1.0)))
                .collect());
        }
    }
    Err(ExtractError::NoAnswerPosition)
}
