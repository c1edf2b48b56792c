//! Shared domain types: tasks, observations, verdicts, and episode traces.
//!
//! Every type here has a canonical snake_case JSON form used by the dataset
//! format, the HTTP API, and trace logs.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::planner::EnvState;
use crate::uncertainty::UncertaintyEstimate;

/// Success or failure of one subtask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Success,
    Failure,
}

impl Outcome {
    pub fn is_success(self) -> bool {
        matches!(self, Outcome::Success)
    }

    pub fn from_bool(success: bool) -> Self {
        if success {
            Outcome::Success
        } else {
            Outcome::Failure
        }
    }
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Outcome::Success => "success",
            Outcome::Failure => "failure",
        })
    }
}

impl FromStr for Outcome {
    type Err = String;

    /// Accepts the operator vocabulary used at the terminal prompt as well as
    /// the canonical names.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "success" | "successful" | "succeeded" | "s" | "yes" | "y" => Ok(Outcome::Success),
            "failure" | "failed" | "fail" | "f" | "no" | "n" => Ok(Outcome::Failure),
            other => Err(format!("expected success or failure, got {other:?}")),
        }
    }
}

/// Primitive manipulation verbs the simulated environment understands.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verb {
    Pick,
    Place,
    Open,
    Close,
}

/// Structured form of a subtask's action, with object and fixture ids
/// matching the keys of [`EnvState`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Action {
    pub verb: Verb,
    /// Object for pick/place, fixture for open/close.
    pub object: String,
    /// Placement target; only meaningful for `place`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<String>,
}

const FILLER_WORDS: &[&str] = &["the", "a", "an", "up", "it", "its"];
const PLACE_PREPOSITIONS: &[&str] = &["on", "onto", "in", "into", "inside", "at", "to"];

impl Action {
    /// Parses plain imperative text such as "pick up the mouse",
    /// "place the sponge in the upper drawer", or "open the upper drawer".
    ///
    /// Multi-word names are joined with `_` ("upper drawer" -> `upper_drawer`).
    pub fn parse(text: &str) -> Option<Action> {
        let words: Vec<String> = text
            .split(|c: char| !c.is_alphanumeric() && c != '_')
            .filter(|w| !w.is_empty())
            .map(str::to_ascii_lowercase)
            .collect();
        let (verb_word, rest) = words.split_first()?;
        let verb = match verb_word.as_str() {
            "pick" | "grasp" | "grab" | "take" => Verb::Pick,
            "place" | "put" | "move" => Verb::Place,
            "open" | "pull" => Verb::Open,
            "close" | "push" | "shut" => Verb::Close,
            _ => return None,
        };
        let content: Vec<&str> = rest
            .iter()
            .map(String::as_str)
            .filter(|w| !FILLER_WORDS.contains(w))
            .collect();
        let join = |ws: &[&str]| -> Option<String> {
            if ws.is_empty() {
                None
            } else {
                Some(ws.join("_"))
            }
        };
        match verb {
            Verb::Place => {
                let split = content
                    .iter()
                    .position(|w| PLACE_PREPOSITIONS.contains(w))?;
                Some(Action {
                    verb,
                    object: join(&content[..split])?,
                    target: Some(join(&content[split + 1..])?),
                })
            }
            _ => Some(Action {
                verb,
                object: join(&content)?,
                target: None,
            }),
        }
    }
}

/// One step `l_i` of a decomposed plan.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Subtask {
    pub index: usize,
    pub description: String,
    pub expected_state: String,
    /// Explicit action for the simulated environment. When absent the
    /// environment parses [`Subtask::description`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub action: Option<Action>,
}

impl Subtask {
    pub fn new(index: usize, description: impl Into<String>, expected_state: impl Into<String>) -> Self {
        Self {
            index,
            description: description.into(),
            expected_state: expected_state.into(),
            action: None,
        }
    }

    pub fn with_action(mut self, action: Action) -> Self {
        self.action = Some(action);
        self
    }

    /// The explicit action if present, otherwise the parsed description.
    pub fn resolve_action(&self) -> Option<Action> {
        self.action
            .clone()
            .or_else(|| Action::parse(&self.description))
    }
}

/// A natural-language task and its ordered subtask list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: String,
    pub instruction: String,
    pub subtasks: Vec<Subtask>,
}

impl TaskSpec {
    pub fn len(&self) -> usize {
        self.subtasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subtasks.is_empty()
    }

    pub fn contains(&self, sub: &Subtask) -> bool {
        self.subtasks.get(sub.index) == Some(sub)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<TaskSpec, LoadError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| LoadError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|source| LoadError::Json {
            path: path.display().to_string(),
            source,
        })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum LoadError {
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parsing {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

/// Lists every invariant violation of `spec`; empty means the spec is valid.
pub fn validate_task_spec(spec: &TaskSpec) -> Vec<String> {
    let mut violations = Vec::new();
    if spec.id.trim().is_empty() {
        violations.push("id empty".to_string());
    }
    if spec.subtasks.is_empty() {
        violations.push("subtasks empty".to_string());
        return violations;
    }
    if spec
        .subtasks
        .iter()
        .enumerate()
        .any(|(pos, s)| s.index != pos)
    {
        violations.push("indices not contiguous".to_string());
    }
    for (pos, s) in spec.subtasks.iter().enumerate() {
        if s.description.trim().is_empty() {
            violations.push(format!("subtask {pos}: description empty"));
        }
        if s.expected_state.trim().is_empty() {
            violations.push(format!("subtask {pos}: expected_state empty"));
        }
    }
    violations
}

/// What the detector looks at after a subtask executes: a camera image or a
/// simulated state snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    #[serde(flatten)]
    pub content: ObservationContent,
    /// Milliseconds since the Unix epoch (or a logical step counter in
    /// simulation). Informational only.
    #[serde(default)]
    pub captured_at: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ObservationContent {
    /// File path, data URL, or bare base64 payload.
    Image { image_ref: String },
    SimState { sim_state: EnvState },
}

impl Observation {
    pub fn image(image_ref: impl Into<String>, captured_at: i64) -> Self {
        Self {
            content: ObservationContent::Image {
                image_ref: image_ref.into(),
            },
            captured_at,
        }
    }

    pub fn sim_state(state: EnvState, captured_at: i64) -> Self {
        Self {
            content: ObservationContent::SimState { sim_state: state },
            captured_at,
        }
    }

    pub fn env_state(&self) -> Option<&EnvState> {
        match &self.content {
            ObservationContent::SimState { sim_state } => Some(sim_state),
            ObservationContent::Image { .. } => None,
        }
    }

    pub fn image_ref(&self) -> Option<&str> {
        match &self.content {
            ObservationContent::Image { image_ref } => Some(image_ref),
            ObservationContent::SimState { .. } => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictSource {
    Model,
    Human,
}

/// The detector's judgment for one subtask.
///
/// Model verdicts always carry the estimate that gated them and the raw
/// reply; human verdicts carry neither.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "VerdictRepr", into = "VerdictRepr")]
pub struct Verdict {
    outcome: Outcome,
    source: VerdictSource,
    estimate: Option<UncertaintyEstimate>,
    raw_response: Option<String>,
}

impl Verdict {
    pub fn model(outcome: Outcome, estimate: UncertaintyEstimate, raw_response: impl Into<String>) -> Self {
        Self {
            outcome,
            source: VerdictSource::Model,
            estimate: Some(estimate),
            raw_response: Some(raw_response.into()),
        }
    }

    pub fn human(outcome: Outcome) -> Self {
        Self {
            outcome,
            source: VerdictSource::Human,
            estimate: None,
            raw_response: None,
        }
    }

    pub fn outcome(&self) -> Outcome {
        self.outcome
    }

    pub fn source(&self) -> VerdictSource {
        self.source
    }

    pub fn estimate(&self) -> Option<&UncertaintyEstimate> {
        self.estimate.as_ref()
    }

    pub fn raw_response(&self) -> Option<&str> {
        self.raw_response.as_deref()
    }
}

#[derive(Serialize, Deserialize)]
struct VerdictRepr {
    outcome: Outcome,
    source: VerdictSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    estimate: Option<UncertaintyEstimate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    raw_response: Option<String>,
}

impl TryFrom<VerdictRepr> for Verdict {
    type Error = String;

    fn try_from(r: VerdictRepr) -> Result<Self, Self::Error> {
        match (r.source, r.estimate, r.raw_response) {
            (VerdictSource::Model, Some(estimate), Some(raw)) => {
                Ok(Verdict::model(r.outcome, estimate, raw))
            }
            (VerdictSource::Model, _, _) => {
                Err("model verdict requires estimate and raw_response".into())
            }
            (VerdictSource::Human, None, None) => Ok(Verdict::human(r.outcome)),
            (VerdictSource::Human, _, _) => {
                Err("human verdict must not carry estimate or raw_response".into())
            }
        }
    }
}

impl From<Verdict> for VerdictRepr {
    fn from(v: Verdict) -> Self {
        VerdictRepr {
            outcome: v.outcome,
            source: v.source,
            estimate: v.estimate,
            raw_response: v.raw_response,
        }
    }
}

/// Result of executing one subtask in an environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionResult {
    pub observation: Observation,
    /// Post-condition truth, available only from simulated environments.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<Outcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub subtask_index: usize,
    pub execution_result: ExecutionResult,
    pub verdict: Verdict,
    pub retry_count_at_step: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinalStatus {
    Success,
    AbortedRetriesExhausted,
    AbortedOperator,
}

/// Ordered history of one closed-loop run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTrace {
    pub task_id: String,
    pub steps: Vec<StepRecord>,
    pub final_status: FinalStatus,
    pub human_queries: usize,
    pub model_queries: usize,
    /// Final value of the retry counter.
    #[serde(default)]
    pub retries: usize,
    /// Whether the task goal physically holds at the end of the episode
    /// (last subtask's post-condition); known only in simulation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub goal_reached: Option<bool>,
}

impl EpisodeTrace {
    pub fn executed_indices(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.subtask_index).collect()
    }

    /// Whether the episode actually accomplished the task: the planner
    /// finished and, when ground truth is known, the goal holds.
    pub fn succeeded(&self) -> bool {
        self.final_status == FinalStatus::Success && self.goal_reached != Some(false)
    }
}

/// Checks a trace against the closed-loop transition rules for a plan of
/// `n` subtasks and retry budget `k`. Returns one entry per violation.
pub fn validate_trace(trace: &EpisodeTrace, n: usize, k: usize) -> Vec<String> {
    let mut violations = Vec::new();
    let mut index = 0usize;
    let mut retry = 0usize;
    for (pos, step) in trace.steps.iter().enumerate() {
        if index >= n || retry >= k {
            violations.push(format!("step {pos}: loop should have terminated"));
            break;
        }
        if step.subtask_index != index {
            violations.push(format!(
                "step {pos}: executed subtask {} but expected {index}",
                step.subtask_index
            ));
        }
        if step.retry_count_at_step != retry {
            violations.push(format!(
                "step {pos}: retry count {} but expected {retry}",
                step.retry_count_at_step
            ));
        }
        if step.verdict.outcome().is_success() {
            index += 1;
        } else {
            index = 0;
            retry += 1;
        }
    }
    let human = trace
        .steps
        .iter()
        .filter(|s| s.verdict.source() == VerdictSource::Human)
        .count();
    if human != trace.human_queries || trace.steps.len() - human != trace.model_queries {
        violations.push("query counts do not match steps".to_string());
    }
    let expected_status = if index == n {
        Some(FinalStatus::Success)
    } else if retry >= k {
        Some(FinalStatus::AbortedRetriesExhausted)
    } else {
        None
    };
    match (expected_status, trace.final_status) {
        (Some(expected), actual) if expected != actual => {
            violations.push(format!("final status {actual:?} but expected {expected:?}"));
        }
        (None, FinalStatus::AbortedOperator) => {}
        (None, actual) => {
            violations.push(format!("final status {actual:?} on an unfinished loop"));
        }
        _ => {}
    }
    if trace.retries != retry {
        violations.push(format!("retries {} but expected {retry}", trace.retries));
    }
    violations
}
