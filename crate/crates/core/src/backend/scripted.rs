//! Rule-driven backend for deterministic tests and fixtures.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{Alternative, Backend, BackendError, BackendReply, BackendRequest, TokenLogprob};
use crate::prompting::StrategyKind;
use crate::uncertainty::{Method, OptionProb};

/// All present fields must match; an empty matcher matches everything.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RuleMatcher {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strategy: Option<StrategyKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub method: Option<Method>,
    /// Substring of the last user message.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_contains: Option<String>,
    /// `true` matches only free-text exchanges (no answer options),
    /// `false` only answer-bearing calls.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub free_text: Option<bool>,
    /// JSON object that must be a subset of the serialized simulated state.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub env: Option<Value>,
}

fn json_subset(pattern: &Value, actual: &Value) -> bool {
    match (pattern, actual) {
        (Value::Object(p), Value::Object(a)) => p
            .iter()
            .all(|(k, v)| a.get(k).is_some_and(|av| json_subset(v, av))),
        _ => pattern == actual,
    }
}

impl RuleMatcher {
    pub fn matches(&self, req: &BackendRequest) -> bool {
        let ctx = req.context.as_ref();
        if let Some(id) = &self.sample_id {
            if ctx.and_then(|c| c.sample_id.as_ref()) != Some(id) {
                return false;
            }
        }
        if let Some(s) = self.strategy {
            if ctx.map(|c| c.strategy) != Some(s) {
                return false;
            }
        }
        if let Some(m) = self.method {
            if ctx.map(|c| c.method) != Some(m) {
                return false;
            }
        }
        if let Some(needle) = &self.prompt_contains {
            if !req.last_user_text().contains(needle.as_str()) {
                return false;
            }
        }
        if let Some(free) = self.free_text {
            if req.is_free_text() != free {
                return false;
            }
        }
        if let Some(pattern) = &self.env {
            let Some(state) = ctx.and_then(|c| c.observation.env_state()) else {
                return false;
            };
            let Ok(actual) = serde_json::to_value(state) else {
                return false;
            };
            if !json_subset(pattern, &actual) {
                return false;
            }
        }
        true
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedRule {
    #[serde(default)]
    pub matcher: RuleMatcher,
    pub reply: String,
    /// Answer-option probabilities reported as log-probabilities at the
    /// answer position. Without them a logprob request fails with
    /// `LogprobsUnsupported`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub option_probs: Option<Vec<OptionProb>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScriptedBackend {
    pub rules: Vec<ScriptedRule>,
}

impl ScriptedBackend {
    pub fn new(rules: Vec<ScriptedRule>) -> Self {
        Self { rules }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, BackendError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| BackendError::InvalidRequest(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| BackendError::InvalidRequest(format!("{}: {e}", path.display())))
    }
}

fn answer_position(reply: &str, probs: &[OptionProb]) -> TokenLogprob {
    let first_word = reply
        .split(|c: char| !c.is_alphanumeric())
        .find(|w| !w.is_empty())
        .unwrap_or("");
    let sampled = probs
        .iter()
        .find(|p| p.token.eq_ignore_ascii_case(first_word))
        .or_else(|| {
            probs
                .iter()
                .reduce(|best, p| if p.probability > best.probability { p } else { best })
        });
    let (token, logprob) = match sampled {
        Some(p) => (p.token.clone(), p.probability.ln()),
        None => (first_word.to_string(), 0.0),
    };
    TokenLogprob {
        token,
        logprob,
        alternatives: probs
            .iter()
            .filter(|p| p.probability > 0.0)
            .map(|p| Alternative {
                token: p.token.clone(),
                logprob: p.probability.ln(),
            })
            .collect(),
    }
}

impl Backend for ScriptedBackend {
    fn complete(&self, req: &BackendRequest) -> Result<BackendReply, BackendError> {
        let rule = self
            .rules
            .iter()
            .find(|r| r.matcher.matches(req))
            .ok_or(BackendError::NoRuleMatched)?;
        let token_logprobs = if req.want_logprobs {
            let probs = rule
                .option_probs
                .as_ref()
                .ok_or(BackendError::LogprobsUnsupported)?;
            Some(vec![answer_position(&rule.reply, probs)])
        } else {
            None
        };
        Ok(BackendReply {
            text: rule.reply.clone(),
            token_logprobs,
            model_name: "scripted".to_string(),
            latency_ms: 0,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{extract_option_distribution, ChatMessage};

    fn request(text: &str, want_logprobs: bool) -> BackendRequest {
        BackendRequest {
            messages: vec![ChatMessage::user(text, true)],
            observation: None,
            want_logprobs,
            top_logprobs: 5,
            model_name: String::new(),
            max_tokens: 16,
            temperature: 0.0,
            answer_options: vec!["Yes".into(), "No".into()],
            context: None,
        }
    }

    fn drawer_rule() -> ScriptedRule {
        ScriptedRule {
            matcher: RuleMatcher {
                prompt_contains: Some("drawer".into()),
                ..Default::default()
            },
            reply: "Yes".into(),
            option_probs: Some(vec![OptionProb::new("Yes", 0.95), OptionProb::new("No", 0.05)]),
        }
    }

    #[test]
    fn rule_lookup() {
        let b = ScriptedBackend::new(vec![drawer_rule()]);
        let reply = b.complete(&request("is the drawer open?", true)).unwrap();
        assert_eq!(reply.text, "Yes");
        let raw = extract_option_distribution(&reply, &["Yes".into(), "No".into()]).unwrap();
        assert!((raw[0].probability - 0.95).abs() < 1e-12);
        assert!((raw[1].probability - 0.05).abs() < 1e-12);
    }

    #[test]
    fn empty_rule_set() {
        let b = ScriptedBackend::default();
        assert_eq!(
            b.complete(&request("anything", false)),
            Err(BackendError::NoRuleMatched)
        );
    }

    #[test]
    fn logprobs_without_probs_unsupported() {
        let mut rule = drawer_rule();
        rule.option_probs = None;
        let b = ScriptedBackend::new(vec![rule]);
        assert_eq!(
            b.complete(&request("drawer", true)),
            Err(BackendError::LogprobsUnsupported)
        );
        assert!(b.complete(&request("drawer", false)).is_ok());
    }

    #[test]
    fn deterministic() {
        let b = ScriptedBackend::new(vec![drawer_rule()]);
        let r = request("the drawer", true);
        assert_eq!(b.complete(&r).unwrap(), b.complete(&r).unwrap());
    }

    #[test]
    fn json_subset_matching() {
        let pattern = serde_json::json!({"fixtures": {"upper_drawer": "open"}});
        let actual = serde_json::json!({"fixtures": {"upper_drawer": "open", "lower": "closed"}, "objects": {}});
        assert!(json_subset(&pattern, &actual));
        let actual = serde_json::json!({"fixtures": {"upper_drawer": "closed"}});
        assert!(!json_subset(&pattern, &actual));
    }
}
