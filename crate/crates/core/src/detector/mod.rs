//! The uncertainty-gated failure detector.
//!
//! After a subtask executes, the detector renders the configured prompting
//! strategy, queries the backend, scores the reply's uncertainty, and trusts
//! the model only when the score is strictly below the threshold. Anything
//! else, including replies with no usable answer or confidence, goes to a
//! human through an [`EscalationChannel`].

mod escalation;

use std::collections::VecDeque;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

pub use escalation::{
    EscalationChannel, EscalationError, EscalationQueue, EscalationRequest, EscalationState, FnChannel,
    Resolution, TerminalChannel, ESCALATION_PROMPT,
};

use crate::backend::{
    extract_option_distribution, Backend, BackendError, BackendRequest, ChatMessage, ObservationPayload,
    QueryContext, RequestSettings,
};
use crate::domain::{Observation, Outcome, Subtask, TaskSpec, Verdict};
use crate::prompting::{
    outcome_for_option, parse_reply, ParsedReply, PromptError, PromptTemplates, RenderedPrompt, StrategyKind,
};
use crate::uncertainty::{
    entropy_uncertainty, parse_self_explained, renormalize, self_explained_uncertainty,
    token_probability_uncertainty, Method, OptionProb, UncertaintyEstimate,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub strategy: StrategyKind,
    pub method: Method,
    /// Estimates strictly below this are trusted.
    pub threshold: f64,
    /// Zero waits forever.
    #[serde(default)]
    pub escalation_timeout_ms: u64,
}

impl DetectorConfig {
    pub fn new(strategy: StrategyKind, method: Method, threshold: f64) -> Self {
        Self {
            strategy,
            method,
            threshold,
            escalation_timeout_ms: 0,
        }
    }

    pub fn validate(&self) -> Result<(), DetectorError> {
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(DetectorError::InvalidConfig(format!(
                "threshold {} outside [0,1]",
                self.threshold
            )));
        }
        Ok(())
    }

    pub fn escalation_timeout(&self) -> Option<Duration> {
        (self.escalation_timeout_ms > 0).then(|| Duration::from_millis(self.escalation_timeout_ms))
    }
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self::new(StrategyKind::Ssc, Method::Entropy, 0.6)
    }
}

/// Everything the detector needs to judge one executed subtask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionQuery {
    pub task: Arc<TaskSpec>,
    pub subtask: Subtask,
    pub observation: Observation,
    /// Position of this detection in the episode.
    pub step_index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub episode_id: Option<String>,
    /// Dataset sample id during offline evaluation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_id: Option<String>,
}

impl DetectionQuery {
    pub fn new(task: Arc<TaskSpec>, subtask: Subtask, observation: Observation, step_index: usize) -> Self {
        Self {
            task,
            subtask,
            observation,
            step_index,
            episode_id: None,
            sample_id: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DetectorError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("escalation {0} expired without an answer")]
    EscalationExpired(String),
    #[error(transparent)]
    Escalation(EscalationError),
    #[error("invalid detector config: {0}")]
    InvalidConfig(String),
    #[error("unsupported query: {0}")]
    Unsupported(String),
}

impl From<EscalationError> for DetectorError {
    fn from(e: EscalationError) -> Self {
        match e {
            EscalationError::Expired(req) => DetectorError::EscalationExpired(req.id),
            other => DetectorError::Escalation(other),
        }
    }
}

/// Anything that turns a query into a verdict.
pub trait FailureDetector: Send + Sync {
    fn detect(&self, query: &DetectionQuery) -> Result<Verdict, DetectorError>;
}

impl<D: FailureDetector + ?Sized> FailureDetector for Arc<D> {
    fn detect(&self, query: &DetectionQuery) -> Result<Verdict, DetectorError> {
        (**self).detect(query)
    }
}

/// Model answer and its uncertainty, before gating.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assessment {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parsed: Option<ParsedReply>,
    pub estimate: UncertaintyEstimate,
    pub raw_response: String,
    /// Self-explained reply without a confidence phrase.
    #[serde(default)]
    pub generation_failed: bool,
}

impl Assessment {
    pub fn predicted_outcome(&self) -> Option<Outcome> {
        self.parsed.as_ref().map(|p| p.predicted_outcome)
    }

    /// Whether the gate trusts this assessment at `threshold`.
    pub fn trusted(&self, threshold: f64) -> bool {
        self.parsed.is_some() && self.estimate.value() < threshold
    }
}

fn score_tokens(
    prompt: &RenderedPrompt,
    reply: &crate::backend::BackendReply,
    parsed: Option<ParsedReply>,
    method: Method,
    raw: String,
) -> Result<Assessment, DetectorError> {
    let unavailable = |reason: String, parsed: Option<ParsedReply>| Assessment {
        parsed,
        estimate: UncertaintyEstimate::unavailable(method, reason),
        raw_response: raw.clone(),
        generation_failed: false,
    };
    let Some(parsed) = parsed else {
        return Ok(unavailable("no answer option in reply".into(), None));
    };
    let raw_probs: Vec<OptionProb> = match extract_option_distribution(reply, &prompt.answer_options) {
        Ok(p) => p,
        Err(e) => return Ok(unavailable(e.to_string(), Some(parsed))),
    };
    let dist = match renormalize(&raw_probs) {
        Ok(d) => d,
        Err(e) => return Ok(unavailable(e.to_string(), Some(parsed))),
    };
    let estimate = match method {
        Method::Entropy => entropy_uncertainty(&dist),
        _ => token_probability_uncertainty(&dist, &parsed.chosen_option)
            .map_err(|e| DetectorError::Unsupported(e.to_string()))?,
    };
    Ok(Assessment {
        parsed: Some(parsed),
        estimate,
        raw_response: raw,
        generation_failed: false,
    })
}

fn score_self_explained(
    prompt: &RenderedPrompt,
    parsed: Option<ParsedReply>,
    executed_index: usize,
    raw: String,
) -> Assessment {
    match parse_self_explained(&raw) {
        Ok(conf) => {
            // the stated answer wins over any earlier option mention
            let stated = prompt
                .answer_options
                .iter()
                .find(|o| {
                    if prompt.strategy == StrategyKind::Nap {
                        **o == conf.answer
                    } else {
                        o.eq_ignore_ascii_case(&conf.answer)
                    }
                })
                .and_then(|o| {
                    outcome_for_option(prompt, o, executed_index)
                        .ok()
                        .map(|outcome| ParsedReply {
                            chosen_option: o.clone(),
                            predicted_outcome: outcome,
                            analysis_text: parsed.as_ref().and_then(|p| p.analysis_text.clone()),
                        })
                });
            match stated {
                Some(p) => Assessment {
                    parsed: Some(p),
                    estimate: self_explained_uncertainty(&conf),
                    raw_response: raw,
                    generation_failed: false,
                },
                None => Assessment {
                    parsed,
                    estimate: UncertaintyEstimate::unavailable(
                        Method::SelfExplained,
                        format!("stated answer {:?} is not an option", conf.answer),
                    ),
                    raw_response: raw,
                    generation_failed: false,
                },
            }
        }
        Err(_) => Assessment {
            parsed,
            estimate: UncertaintyEstimate::unavailable(Method::SelfExplained, "no confidence phrase"),
            raw_response: raw,
            generation_failed: true,
        },
    }
}

/// Renders, queries, parses, and scores; no gating.
pub fn assess(
    query: &DetectionQuery,
    cfg: &DetectorConfig,
    backend: &dyn Backend,
    templates: &PromptTemplates,
    settings: &RequestSettings,
) -> Result<Assessment, DetectorError> {
    let executed_index = query.subtask.index;
    if !query.task.contains(&query.subtask) {
        return Err(PromptError::ForeignSubtask(executed_index).into());
    }
    let prompt = templates.render(cfg.strategy, &query.task, executed_index)?;
    let suffix = (cfg.method == Method::SelfExplained).then_some(templates.self_explained_instruction.as_str());
    let payload = ObservationPayload::from_observation(&query.observation)?;
    let context = QueryContext {
        sample_id: query.sample_id.clone(),
        strategy: cfg.strategy,
        method: cfg.method,
        subtask: query.subtask.clone(),
        executed_index,
        observation: query.observation.clone(),
    };

    let mut messages: Vec<ChatMessage> = Vec::new();
    let mut analysis: Option<String> = None;
    let mut final_reply = None;
    for step in prompt.steps(suffix) {
        messages.push(ChatMessage::user(step.text, step.attach_observation));
        let want_logprobs = step.is_final && cfg.method.uses_logprobs();
        let request = BackendRequest {
            messages: messages.clone(),
            observation: Some(payload.clone()),
            want_logprobs,
            top_logprobs: settings.top_logprobs,
            model_name: settings.model_name.clone(),
            max_tokens: settings.max_tokens,
            temperature: settings.temperature,
            answer_options: if step.is_final {
                prompt.answer_options.clone()
            } else {
                Vec::new()
            },
            context: Some(context.clone()),
        };
        let reply = backend.complete(&request)?;
        if step.is_final {
            final_reply = Some(reply);
        } else {
            messages.push(ChatMessage::assistant(reply.text.clone()));
            analysis = Some(reply.text);
        }
    }
    let reply = final_reply.ok_or_else(|| PromptError::Template("prompt has no final step".into()))?;
    let raw = reply.text.clone();
    let parsed = parse_reply(&prompt, &raw, executed_index)
        .ok()
        .map(|p| p.with_analysis(analysis));
    match cfg.method {
        Method::SelfExplained => Ok(score_self_explained(&prompt, parsed, executed_index, raw)),
        m => score_tokens(&prompt, &reply, parsed, m, raw),
    }
}

/// One gated detection: trust the model strictly below the threshold,
/// otherwise block on the escalation channel.
pub fn failure_detect(
    query: &DetectionQuery,
    cfg: &DetectorConfig,
    backend: &dyn Backend,
    templates: &PromptTemplates,
    settings: &RequestSettings,
    channel: &dyn EscalationChannel,
) -> Result<Verdict, DetectorError> {
    cfg.validate()?;
    let assessment = assess(query, cfg, backend, templates, settings)?;
    if assessment.trusted(cfg.threshold) {
        let outcome = assessment.predicted_outcome().expect("trusted implies parsed");
        return Ok(Verdict::model(outcome, assessment.estimate, assessment.raw_response));
    }
    tracing::info!(
        task = %query.task.id,
        subtask = query.subtask.index,
        uncertainty = assessment.estimate.value(),
        "escalating to operator"
    );
    let request = EscalationRequest::new(query.clone(), assessment.raw_response, assessment.estimate);
    let resolution = channel.ask(request, cfg.escalation_timeout())?;
    Ok(Verdict::human(resolution.outcome))
}

/// Backend-driven detector bundling configuration and collaborators.
pub struct MllmDetector<B, C> {
    pub config: DetectorConfig,
    pub backend: B,
    pub channel: C,
    pub templates: PromptTemplates,
    pub settings: RequestSettings,
}

impl<B: Backend, C: EscalationChannel> MllmDetector<B, C> {
    pub fn new(config: DetectorConfig, backend: B, channel: C) -> Result<Self, DetectorError> {
        config.validate()?;
        Ok(Self {
            config,
            backend,
            channel,
            templates: PromptTemplates::builtin(),
            settings: RequestSettings::default(),
        })
    }

    pub fn with_templates(mut self, templates: PromptTemplates) -> Self {
        self.templates = templates;
        self
    }

    pub fn with_settings(mut self, settings: RequestSettings) -> Self {
        self.settings = settings;
        self
    }

    pub fn assess(&self, query: &DetectionQuery) -> Result<Assessment, DetectorError> {
        assess(query, &self.config, &self.backend, &self.templates, &self.settings)
    }
}

impl<B: Backend, C: EscalationChannel> FailureDetector for MllmDetector<B, C> {
    fn detect(&self, query: &DetectionQuery) -> Result<Verdict, DetectorError> {
        failure_detect(
            query,
            &self.config,
            &self.backend,
            &self.templates,
            &self.settings,
            &self.channel,
        )
    }
}

/// Zero-uncertainty token estimate for a verdict known with certainty.
pub fn certain_estimate(outcome: Outcome) -> UncertaintyEstimate {
    let (yes, no) = if outcome.is_success() { (1.0, 0.0) } else { (0.0, 1.0) };
    let dist = renormalize(&[OptionProb::new("Yes", yes), OptionProb::new("No", no)]).expect("valid distribution");
    let chosen = if outcome.is_success() { "Yes" } else { "No" };
    token_probability_uncertainty(&dist, chosen).expect("chosen option present")
}

/// Replays a fixed verdict sequence, one per call.
#[derive(Debug, Default)]
pub struct ScriptedDetector {
    script: Mutex<VecDeque<ScriptedVerdict>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptedVerdict {
    pub outcome: Outcome,
    #[serde(default)]
    pub human: bool,
}

impl ScriptedDetector {
    pub fn new(script: impl IntoIterator<Item = ScriptedVerdict>) -> Self {
        Self {
            script: Mutex::new(script.into_iter().collect()),
        }
    }

    /// Model verdicts with the given outcomes.
    pub fn from_outcomes(outcomes: impl IntoIterator<Item = Outcome>) -> Self {
        Self::new(outcomes.into_iter().map(|outcome| ScriptedVerdict { outcome, human: false }))
    }

    pub fn remaining(&self) -> usize {
        self.script.lock().unwrap_or_else(|e| e.into_inner()).len()
    }
}

impl FailureDetector for ScriptedDetector {
    fn detect(&self, _query: &DetectionQuery) -> Result<Verdict, DetectorError> {
        let next = self
            .script
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .pop_front()
            .ok_or_else(|| DetectorError::Unsupported("verdict script exhausted".into()))?;
        Ok(if next.human {
            Verdict::human(next.outcome)
        } else {
            let label = if next.outcome.is_success() { "Yes" } else { "No" };
            Verdict::model(next.outcome, certain_estimate(next.outcome), label)
        })
    }
}
