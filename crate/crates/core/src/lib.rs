//! Uncertainty-gated failure detection for closed-loop task planning.
//!
//! A multimodal model is asked, after every executed subtask, whether the
//! subtask succeeded. Its answer is scored for uncertainty (token probability,
//! entropy, or self-stated confidence) and only trusted below a threshold;
//! everything else is escalated to a human operator. The planner advances on
//! success and restarts the plan on failure, within a retry budget.
//!
//! Module map:
//!
//! - [`domain`]: tasks, observations, verdicts, and episode traces.
//! - [`uncertainty`]: the three uncertainty scores.
//! - [`prompting`]: SSC / SRA / NAP prompt rendering and reply parsing.
//! - [`backend`]: live OpenAI-compatible client, scripted and simulated backends.
//! - [`detector`]: the gated failure detector and the escalation queue.
//! - [`planner`]: the closed-loop planner and the simulated tabletop environment.
//! - [`eval`]: dataset ingestion, calibration / selective curves, and reports.

pub mod backend;
pub mod detector;
pub mod domain;
pub mod eval;
pub mod planner;
pub mod prompting;
pub mod uncertainty;

pub use domain::{
    EpisodeTrace, FinalStatus, Observation, Outcome, StepRecord, Subtask, TaskSpec, Verdict,
    VerdictSource,
};
pub use uncertainty::{Method, UncertaintyEstimate};

pub(crate) fn now_millis() -> i64 {
    use std::time::{SystemTime, UNIX_EPOCH};
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as i64)
        .unwrap_or(0)
}
