//! Blocking client for OpenAI-compatible `/chat/completions` endpoints.

use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tracing::{debug, warn};

use super::{
    Alternative, Backend, BackendError, BackendReply, BackendRequest, ChatRole, ObservationPayload,
    TokenLogprob,
};

fn default_api_key_env() -> String {
    "LOOPGUARD_API_KEY".to_string()
}

fn default_timeout_ms() -> u64 {
    60_000
}

fn default_max_retries() -> u32 {
    3
}

fn default_backoff_ms() -> u64 {
    250
}

fn default_max_in_flight() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiveConfig {
    /// Base URL up to and including the API version, e.g.
    /// `http://localhost:8000/v1`.
    pub endpoint: String,
    pub model: String,
    /// Environment variable holding the bearer token. Unset variable means
    /// no `Authorization` header.
    #[serde(default = "default_api_key_env")]
    pub api_key_env: String,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
}

impl LiveConfig {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            model: model.into(),
            api_key_env: default_api_key_env(),
            timeout_ms: default_timeout_ms(),
            max_retries: default_max_retries(),
            backoff_ms: default_backoff_ms(),
            max_in_flight: default_max_in_flight(),
        }
    }
}

/// Counting gate bounding concurrent requests.
struct InFlight {
    limit: usize,
    active: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a InFlight);

impl InFlight {
    fn new(limit: usize) -> Self {
        Self {
            limit: limit.max(1),
            active: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut active = self.active.lock().unwrap_or_else(|e| e.into_inner());
        while *active >= self.limit {
            active = self.freed.wait(active).unwrap_or_else(|e| e.into_inner());
        }
        *active += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut active = self.0.active.lock().unwrap_or_else(|e| e.into_inner());
        *active -= 1;
        self.0.freed.notify_one();
    }
}

/// Stateless chat-completions client: every call sends exactly the turns it
/// is given.
pub struct OpenAiCompatClient {
    config: LiveConfig,
    api_key: Option<String>,
    http: reqwest::blocking::Client,
    gate: InFlight,
}

impl std::fmt::Debug for OpenAiCompatClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("OpenAiCompatClient")
            .field("config", &self.config)
            .field("api_key", &self.api_key.as_ref().map(|_| "<redacted>"))
            .finish()
    }
}

#[derive(Deserialize)]
struct WireResponse {
    #[serde(default)]
    model: Option<String>,
    choices: Vec<WireChoice>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
    #[serde(default)]
    logprobs: Option<WireLogprobs>,
}

#[derive(Deserialize)]
struct WireMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct WireLogprobs {
    #[serde(default)]
    content: Option<Vec<WireTokenLogprob>>,
}

#[derive(Deserialize)]
struct WireTokenLogprob {
    token: String,
    logprob: f64,
    #[serde(default)]
    top_logprobs: Vec<WireTop>,
}

#[derive(Deserialize)]
struct WireTop {
    token: String,
    logprob: f64,
}

impl OpenAiCompatClient {
    pub fn new(config: LiveConfig) -> Result<Self, BackendError> {
        let api_key = std::env::var(&config.api_key_env)
            .ok()
            .filter(|k| !k.is_empty());
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(config.timeout_ms))
            .build()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        Ok(Self {
            gate: InFlight::new(config.max_in_flight),
            config,
            api_key,
            http,
        })
    }

    pub fn config(&self) -> &LiveConfig {
        &self.config
    }

    fn url(&self, path: &str) -> String {
        format!("{}/{}", self.config.endpoint.trim_end_matches('/'), path)
    }

    /// Wire body for a request.
    pub fn request_body(&self, req: &BackendRequest) -> Value {
        let messages: Vec<Value> = req
            .messages
            .iter()
            .map(|m| match m.role {
                ChatRole::Assistant => json!({"role": "assistant", "content": m.text}),
                ChatRole::User => {
                    let mut parts = vec![json!({"type": "text", "text": m.text})];
                    if m.attach_observation {
                        match &req.observation {
                            Some(ObservationPayload::Text { text }) => {
                                parts.push(json!({"type": "text", "text": text}));
                            }
                            Some(img @ ObservationPayload::Image { .. }) => {
                                parts.push(json!({
                                    "type": "image_url",
                                    "image_url": {"url": img.data_url()},
                                }));
                            }
                            None => {}
                        }
                    }
                    json!({"role": "user", "content": parts})
                }
            })
            .collect();
        let model = if req.model_name.is_empty() {
            &self.config.model
        } else {
            &req.model_name
        };
        let mut body = json!({
            "model": model,
            "messages": messages,
            "max_tokens": req.max_tokens,
            "temperature": req.temperature,
        });
        if req.want_logprobs {
            body["logprobs"] = json!(true);
            body["top_logprobs"] = json!(req.top_logprobs);
        }
        body
    }

    fn attempt(&self, req: &BackendRequest, body: &Value) -> Result<BackendReply, BackendError> {
        let started = Instant::now();
        let mut call = self.http.post(self.url("chat/completions")).json(body);
        if let Some(key) = &self.api_key {
            call = call.bearer_auth(key);
        }
        let response = call
            .send()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = response.status();
        let text = response
            .text()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        if status.as_u16() == 429 {
            return Err(BackendError::RateLimited);
        }
        if status.is_server_error() {
            return Err(BackendError::Transport(format!("HTTP {status}: {text}")));
        }
        if !status.is_success() {
            if req.want_logprobs && text.to_ascii_lowercase().contains("logprobs") {
                return Err(BackendError::LogprobsUnsupported);
            }
            return Err(BackendError::Http {
                status: status.as_u16(),
                body: text,
            });
        }
        let wire: WireResponse = serde_json::from_str(&text)
            .map_err(|e| BackendError::ProtocolMismatch(e.to_string()))?;
        let choice = wire
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| BackendError::ProtocolMismatch("no choices".into()))?;
        let content = choice.message.content.unwrap_or_default();
        let token_logprobs = if req.want_logprobs {
            let positions = choice
                .logprobs
                .and_then(|l| l.content)
                .filter(|c| !c.is_empty())
                .ok_or(BackendError::LogprobsUnsupported)?;
            Some(
                positions
                    .into_iter()
                    .map(|p| TokenLogprob {
                        token: p.token,
                        logprob: p.logprob,
                        alternatives: p
                            .top_logprobs
                            .into_iter()
                            .map(|t| Alternative {
                                token: t.token,
                                logprob: t.logprob,
                            })
                            .collect(),
                    })
                    .collect(),
            )
        } else {
            None
        };
        Ok(BackendReply {
            text: content,
            token_logprobs,
            model_name: wire.model.unwrap_or_else(|| self.config.model.clone()),
            latency_ms: started.elapsed().as_millis() as u64,
        })
    }
}

impl Backend for OpenAiCompatClient {
    fn complete(&self, req: &BackendRequest) -> Result<BackendReply, BackendError> {
        req.validate()?;
        let body = self.request_body(req);
        let _permit = self.gate.acquire();
        let mut attempt = 0u32;
        loop {
            match self.attempt(req, &body) {
                Err(e) if e.is_retryable() && attempt < self.config.max_retries => {
                    let delay = self.config.backoff_ms.saturating_mul(1u64 << attempt.min(16));
                    warn!(error = %e, attempt, delay_ms = delay, "retrying backend call");
                    std::thread::sleep(Duration::from_millis(delay));
                    attempt += 1;
                }
                other => {
                    debug!(ok = other.is_ok(), attempt, "backend call finished");
                    return other;
                }
            }
        }
    }

    /// Any HTTP answer from `{endpoint}/models` counts as reachable.
    fn health_check(&self) -> Result<(), BackendError> {
        self.http
            .get(self.url("models"))
            .timeout(Duration::from_millis(self.config.timeout_ms.min(5_000)))
            .send()
            .map(|_| ())
            .map_err(|e| BackendError::Unreachable(e.to_string()))
    }
}
