//! Prompt rendering for the three detection strategies and parsing of the
//! backend's answer into a predicted outcome.
//!
//! - SSC (subgoal state comparison): ask directly whether the expected state
//!   holds in the observation.
//! - SRA (spatial relationship analysis): ask for a spatial analysis first,
//!   then ask the same yes/no question with the analysis in context.
//! - NAP (next action prediction): show the lettered plan and ask which
//!   subtask comes next; the answer is correct only if it is the successor
//!   of the executed subtask.
//!
//! Templates are plain text resources with `[[user]]`, `[[user observation]]`
//! and `[[assistant]]` section headers and the placeholders
//! `{task_instruction}`, `{subtask}`, `{expected_state}`, `{plan_options}`.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::domain::{validate_task_spec, Outcome, Subtask, TaskSpec};

pub const TERMINAL_OPTION: &str = "task complete";
const MAX_NAP_OPTIONS: usize = 26;
const PLACEHOLDERS: [&str; 4] = [
    "{task_instruction}",
    "{subtask}",
    "{expected_state}",
    "{plan_options}",
];

const BUILTIN_SSC: &str = include_str!("../templates/ssc.txt");
const BUILTIN_SRA: &str = include_str!("../templates/sra.txt");
const BUILTIN_NAP: &str = include_str!("../templates/nap.txt");
const BUILTIN_SELF_EXPLAINED: &str = include_str!("../templates/self_explained.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Ssc,
    Sra,
    Nap,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 3] = [StrategyKind::Ssc, StrategyKind::Sra, StrategyKind::Nap];

    pub fn label(self) -> &'static str {
        match self {
            StrategyKind::Ssc => "SSC",
            StrategyKind::Sra => "SRA",
            StrategyKind::Nap => "NAP",
        }
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for StrategyKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ssc" => Ok(StrategyKind::Ssc),
            "sra" => Ok(StrategyKind::Sra),
            "nap" | "nac" => Ok(StrategyKind::Nap),
            other => Err(format!("unknown prompting strategy {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PromptError {
    #[error("invalid task: {}", .0.join("; "))]
    InvalidTask(Vec<String>),
    #[error("subtask {0} does not belong to the task")]
    ForeignSubtask(usize),
    #[error("executed index {index} out of range for {len} subtasks")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("plan of {0} subtasks needs more option letters than A-Z")]
    TooManyOptions(usize),
    #[error("template: {0}")]
    Template(String),
    #[error("no answer option found in reply")]
    Unparseable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TurnRole {
    User,
    /// Shape of the reply expected at this point; never sent verbatim.
    AssistantExpected,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub role: TurnRole,
    pub text: String,
    pub attach_observation: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub strategy: StrategyKind,
    pub turns: Vec<Turn>,
    /// Option tokens the reply must come from.
    pub answer_options: Vec<String>,
    /// For NAP, the text behind each option letter (plan subtasks, then the
    /// terminal option). Empty for yes/no strategies.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub option_labels: Vec<String>,
}

/// One user message to send, in order. Non-final steps are free-text
/// exchanges whose reply is fed back as context.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptStep {
    pub text: String,
    pub attach_observation: bool,
    pub is_final: bool,
}

impl RenderedPrompt {
    /// Human-readable dump of every turn, used for golden files and logs.
    pub fn transcript(&self) -> String {
        let mut out = String::new();
        for turn in &self.turns {
            let header = match (turn.role, turn.attach_observation) {
                (TurnRole::User, true) => "[[user observation]]",
                (TurnRole::User, false) => "[[user]]",
                (TurnRole::AssistantExpected, _) => "[[assistant]]",
            };
            out.push_str(header);
            out.push('\n');
            out.push_str(&turn.text);
            out.push('\n');
        }
        out
    }

    pub fn user_turns(&self) -> impl Iterator<Item = &Turn> {
        self.turns.iter().filter(|t| t.role == TurnRole::User)
    }

    /// User messages in send order. The final one carries the trailing
    /// expected-answer line and `suffix` (e.g. the self-explained
    /// confidence instruction).
    pub fn steps(&self, suffix: Option<&str>) -> Vec<PromptStep> {
        let last_user = self
            .turns
            .iter()
            .rposition(|t| t.role == TurnRole::User)
            .unwrap_or(0);
        let mut steps = Vec::new();
        for (pos, turn) in self.turns.iter().enumerate() {
            if turn.role != TurnRole::User {
                continue;
            }
            let is_final = pos == last_user;
            let mut text = turn.text.clone();
            if is_final {
                for hint in self.turns[pos + 1..]
                    .iter()
                    .filter(|t| t.role == TurnRole::AssistantExpected)
                {
                    text.push('\n');
                    text.push_str(&hint.text);
                }
                if let Some(suffix) = suffix.filter(|s| !s.trim().is_empty()) {
                    text.push('\n');
                    text.push_str(suffix.trim_end());
                }
            }
            steps.push(PromptStep {
                text,
                attach_observation: turn.attach_observation,
                is_final,
            });
        }
        steps
    }

    /// The option a correct NAP answer selects after `executed_index`.
    pub fn nap_expected_option(&self, executed_index: usize) -> Option<&str> {
        self.answer_options.get(executed_index + 1).map(String::as_str)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct TemplateTurn {
    role: TurnRole,
    attach_observation: bool,
    text: String,
}

/// A parsed template resource.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    turns: Vec<TemplateTurn>,
}

impl FromStr for Template {
    type Err = PromptError;

    fn from_str(source: &str) -> Result<Self, Self::Err> {
        let mut turns: Vec<TemplateTurn> = Vec::new();
        for line in source.lines() {
            let trimmed = line.trim();
            if let Some(header) = trimmed.strip_prefix("[[").and_then(|h| h.strip_suffix("]]")) {
                let (role, attach) = match header.trim() {
                    "user" => (TurnRole::User, false),
                    "user observation" => (TurnRole::User, true),
                    "assistant" => (TurnRole::AssistantExpected, false),
                    other => {
                        return Err(PromptError::Template(format!("unknown section [[{other}]]")))
                    }
                };
                turns.push(TemplateTurn {
                    role,
                    attach_observation: attach,
                    text: String::new(),
                });
                continue;
            }
            let Some(turn) = turns.last_mut() else {
                if trimmed.is_empty() {
                    continue;
                }
                return Err(PromptError::Template("text before first section header".into()));
            };
            if !turn.text.is_empty() {
                turn.text.push('\n');
            }
            turn.text.push_str(line);
        }
        for turn in &mut turns {
            turn.text = turn.text.trim_end().to_string();
            check_placeholders(&turn.text)?;
        }
        let attached = turns.iter().filter(|t| t.attach_observation).count();
        if attached != 1 {
            return Err(PromptError::Template(format!(
                "exactly one turn must attach the observation, found {attached}"
            )));
        }
        if !turns.iter().any(|t| t.role == TurnRole::User) {
            return Err(PromptError::Template("no user turn".into()));
        }
        Ok(Template { turns })
    }
}

fn check_placeholders(text: &str) -> Result<(), PromptError> {
    let mut rest = text;
    while let Some(start) = rest.find('{') {
        let tail = &rest[start..];
        let Some(end) = tail.find('}') else { break };
        let name = &tail[..=end];
        if !PLACEHOLDERS.contains(&name) {
            return Err(PromptError::Template(format!("unknown placeholder {name}")));
        }
        rest = &tail[end + 1..];
    }
    Ok(())
}

struct Bindings<'a> {
    task_instruction: &'a str,
    subtask: &'a str,
    expected_state: &'a str,
    plan_options: &'a str,
}

impl Template {
    fn render(
        &self,
        strategy: StrategyKind,
        b: &Bindings<'_>,
        answer_options: Vec<String>,
        option_labels: Vec<String>,
    ) -> RenderedPrompt {
        let turns = self
            .turns
            .iter()
            .map(|t| Turn {
                role: t.role,
                attach_observation: t.attach_observation,
                text: t
                    .text
                    .replace("{task_instruction}", b.task_instruction)
                    .replace("{subtask}", b.subtask)
                    .replace("{expected_state}", b.expected_state)
                    .replace("{plan_options}", b.plan_options),
            })
            .collect();
        RenderedPrompt {
            strategy,
            turns,
            answer_options,
            option_labels,
        }
    }
}

/// The full template set. Defaults are compiled in; any file present in an
/// override directory (`ssc.txt`, `sra.txt`, `nap.txt`, `self_explained.txt`)
/// replaces its default.
#[derive(Debug, Clone)]
pub struct PromptTemplates {
    pub ssc: Template,
    pub sra: Template,
    pub nap: Template,
    pub self_explained_instruction: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self::builtin()
    }
}

impl PromptTemplates {
    pub fn builtin() -> Self {
        Self {
            ssc: BUILTIN_SSC.parse().expect("builtin SSC template"),
            sra: BUILTIN_SRA.parse().expect("builtin SRA template"),
            nap: BUILTIN_NAP.parse().expect("builtin NAP template"),
            self_explained_instruction: BUILTIN_SELF_EXPLAINED.trim().to_string(),
        }
    }

    pub fn from_dir(dir: impl AsRef<Path>) -> Result<Self, PromptError> {
        let dir = dir.as_ref();
        let read = |name: &str| -> Result<Option<String>, PromptError> {
            let path = dir.join(name);
            if !path.exists() {
                return Ok(None);
            }
            std::fs::read_to_string(&path)
                .map(Some)
                .map_err(|e| PromptError::Template(format!("{}: {e}", path.display())))
        };
        let mut set = Self::builtin();
        if let Some(s) = read("ssc.txt")? {
            set.ssc = s.parse()?;
        }
        if let Some(s) = read("sra.txt")? {
            set.sra = s.parse()?;
        }
        if let Some(s) = read("nap.txt")? {
            set.nap = s.parse()?;
        }
        if let Some(s) = read("self_explained.txt")? {
            set.self_explained_instruction = s.trim().to_string();
        }
        Ok(set)
    }

    pub fn render(
        &self,
        strategy: StrategyKind,
        task: &TaskSpec,
        executed_index: usize,
    ) -> Result<RenderedPrompt, PromptError> {
        let sub = task.subtasks.get(executed_index).ok_or(PromptError::IndexOutOfRange {
            index: executed_index,
            len: task.len(),
        })?;
        match strategy {
            StrategyKind::Ssc => self.render_ssc(task, sub),
            StrategyKind::Sra => self.render_sra(task, sub),
            StrategyKind::Nap => self.render_nap(task, executed_index),
        }
    }

    pub fn render_ssc(&self, task: &TaskSpec, sub: &Subtask) -> Result<RenderedPrompt, PromptError> {
        check_membership(task, sub)?;
        Ok(self
            .ssc
            .render(StrategyKind::Ssc, &yes_no_bindings(task, sub), yes_no(), Vec::new()))
    }

    pub fn render_sra(&self, task: &TaskSpec, sub: &Subtask) -> Result<RenderedPrompt, PromptError> {
        check_membership(task, sub)?;
        Ok(self
            .sra
            .render(StrategyKind::Sra, &yes_no_bindings(task, sub), yes_no(), Vec::new()))
    }

    pub fn render_nap(&self, task: &TaskSpec, executed_index: usize) -> Result<RenderedPrompt, PromptError> {
        let violations = validate_task_spec(task);
        if !violations.is_empty() {
            return Err(PromptError::InvalidTask(violations));
        }
        let n = task.len();
        if executed_index >= n {
            return Err(PromptError::IndexOutOfRange {
                index: executed_index,
                len: n,
            });
        }
        if n + 1 > MAX_NAP_OPTIONS {
            return Err(PromptError::TooManyOptions(n));
        }
        let letters: Vec<String> = (0..=n)
            .map(|i| char::from(b'A' + i as u8).to_string())
            .collect();
        let labels: Vec<String> = task
            .subtasks
            .iter()
            .map(|s| s.description.clone())
            .chain(std::iter::once(TERMINAL_OPTION.to_string()))
            .collect();
        let plan = letters
            .iter()
            .zip(&labels)
            .map(|(l, d)| format!("({l}) {d}"))
            .collect::<Vec<_>>()
            .join(", ");
        let sub = &task.subtasks[executed_index];
        let bindings = Bindings {
            task_instruction: &task.instruction,
            subtask: &sub.description,
            expected_state: &sub.expected_state,
            plan_options: &plan,
        };
        Ok(self.nap.render(StrategyKind::Nap, &bindings, letters, labels))
    }
}

fn yes_no() -> Vec<String> {
    vec!["Yes".to_string(), "No".to_string()]
}

fn yes_no_bindings<'a>(task: &'a TaskSpec, sub: &'a Subtask) -> Bindings<'a> {
    Bindings {
        task_instruction: &task.instruction,
        subtask: &sub.description,
        expected_state: &sub.expected_state,
        plan_options: "",
    }
}

fn check_membership(task: &TaskSpec, sub: &Subtask) -> Result<(), PromptError> {
    let violations = validate_task_spec(task);
    if !violations.is_empty() {
        return Err(PromptError::InvalidTask(violations));
    }
    if !task.contains(sub) {
        return Err(PromptError::ForeignSubtask(sub.index));
    }
    Ok(())
}

/// The answer extracted from a backend reply.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedReply {
    pub chosen_option: String,
    pub predicted_outcome: Outcome,
    /// SRA's free-text spatial analysis, kept for logs only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub analysis_text: Option<String>,
}

impl ParsedReply {
    pub fn with_analysis(mut self, analysis: Option<String>) -> Self {
        self.analysis_text = analysis;
        self
    }
}

/// Alphanumeric runs of `text`; a "standalone" token is one of these.
fn words(text: &str) -> impl Iterator<Item = &str> {
    text.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty())
}

/// Finds the first standalone option token in `raw`. Yes/No matching is
/// case-insensitive; NAP letters must be upper-case so the article "a"
/// never matches.
pub fn find_option<'p>(prompt: &'p RenderedPrompt, raw: &str) -> Option<&'p str> {
    let case_insensitive = prompt.strategy != StrategyKind::Nap;
    words(raw).find_map(|w| {
        prompt
            .answer_options
            .iter()
            .find(|opt| {
                if case_insensitive {
                    opt.eq_ignore_ascii_case(w)
                } else {
                    opt.as_str() == w
                }
            })
            .map(String::as_str)
    })
}

/// Maps a chosen option to the predicted subtask outcome.
pub fn outcome_for_option(
    prompt: &RenderedPrompt,
    option: &str,
    executed_index: usize,
) -> Result<Outcome, PromptError> {
    if !prompt.answer_options.iter().any(|o| o == option) {
        return Err(PromptError::Unparseable);
    }
    Ok(match prompt.strategy {
        StrategyKind::Ssc | StrategyKind::Sra => Outcome::from_bool(option.eq_ignore_ascii_case("yes")),
        StrategyKind::Nap => Outcome::from_bool(prompt.nap_expected_option(executed_index) == Some(option)),
    })
}

pub fn parse_reply(
    prompt: &RenderedPrompt,
    raw: &str,
    executed_index: usize,
) -> Result<ParsedReply, PromptError> {
    let chosen = find_option(prompt, raw).ok_or(PromptError::Unparseable)?;
    Ok(ParsedReply {
        chosen_option: chosen.to_string(),
        predicted_outcome: outcome_for_option(prompt, chosen, executed_index)?,
        analysis_text: None,
    })
}
