//! The closed-loop planner: execute, detect, advance or restart.

mod montecarlo;
mod sim;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use montecarlo::{
    episode_seeds, oracle_operator, simulate, sweep, sweep_table, SimulationError, SimulationSpec, SweepRow,
};
pub use sim::{
    ground_truth_check, sim_execute, Clock, EnvState, GripperState, ObjectState, OracleDetector, Perturbation,
    SimEnv, SimEnvConfig, SimError, GRIPPER,
};

use crate::detector::{DetectionQuery, DetectorConfig, DetectorError, FailureDetector};
use crate::domain::{
    validate_task_spec, EpisodeTrace, ExecutionResult, FinalStatus, Observation, Outcome, StepRecord, Subtask,
    TaskSpec, VerdictSource,
};

/// Something subtasks can be executed in.
pub trait TaskEnvironment {
    type Error: std::error::Error + Send + Sync + 'static;

    fn reset(&mut self) -> Observation;

    /// Executes one subtask; the returned observation reflects the state
    /// after execution.
    fn execute(&mut self, subtask: &Subtask) -> Result<Observation, Self::Error>;

    /// Post-condition truth for metrics; `None` outside simulation.
    fn ground_truth(&self, _subtask: &Subtask) -> Option<Outcome> {
        None
    }

    /// Whether the whole task's goal currently holds; `None` if unknown.
    fn goal_reached(&self, _task: &TaskSpec) -> Option<bool> {
        None
    }
}

impl<E: TaskEnvironment + ?Sized> TaskEnvironment for Box<E> {
    type Error = E::Error;

    fn reset(&mut self) -> Observation {
        (**self).reset()
    }

    fn execute(&mut self, subtask: &Subtask) -> Result<Observation, Self::Error> {
        (**self).execute(subtask)
    }

    fn ground_truth(&self, subtask: &Subtask) -> Option<Outcome> {
        (**self).ground_truth(subtask)
    }

    fn goal_reached(&self, task: &TaskSpec) -> Option<bool> {
        (**self).goal_reached(task)
    }
}

fn default_retries() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannerConfig {
    /// Retry budget `k`.
    #[serde(default = "default_retries")]
    pub max_retries: usize,
    #[serde(default)]
    pub detector: DetectorConfig,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            max_retries: default_retries(),
            detector: DetectorConfig::default(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PlannerError {
    #[error("invalid task: {}", .0.join("; "))]
    InvalidTask(Vec<String>),
    #[error("environment: {0}")]
    Environment(#[source] Box<dyn std::error::Error + Send + Sync>),
    #[error(transparent)]
    Detector(DetectorError),
}

/// An episode that stopped on an error, with the trace up to that point.
#[derive(Debug, thiserror::Error)]
#[error("episode {} aborted after {} steps: {source}", .trace.task_id, .trace.steps.len())]
pub struct EpisodeError {
    pub trace: EpisodeTrace,
    #[source]
    pub source: PlannerError,
}

/// Per-episode identity and a hook observing each recorded step.
#[derive(Default)]
pub struct EpisodeContext<'a> {
    pub episode_id: Option<String>,
    pub on_step: Option<&'a mut dyn FnMut(&StepRecord)>,
}

/// Runs the loop: while `index < n` and `retry < k`, execute subtask
/// `index`, detect, then advance on success or restart from subtask 0 with
/// `retry + 1` on failure. The environment is never reset.
///
/// An expired escalation ends the episode as `aborted_operator`; other
/// detector and environment errors abort with the partial trace.
pub fn run_episode<E: TaskEnvironment + ?Sized>(
    task: &TaskSpec,
    env: &mut E,
    detector: &dyn FailureDetector,
    max_retries: usize,
    mut ctx: EpisodeContext<'_>,
) -> Result<EpisodeTrace, EpisodeError> {
    let mut trace = EpisodeTrace {
        task_id: task.id.clone(),
        steps: Vec::new(),
        final_status: FinalStatus::AbortedOperator,
        human_queries: 0,
        model_queries: 0,
        retries: 0,
        goal_reached: None,
    };
    let violations = validate_task_spec(task);
    if !violations.is_empty() {
        return Err(EpisodeError {
            trace,
            source: PlannerError::InvalidTask(violations),
        });
    }
    let shared = Arc::new(task.clone());
    let n = task.len();
    let mut index = 0usize;
    let mut retry = 0usize;
    while index < n && retry < max_retries {
        let subtask = &task.subtasks[index];
        let observation = match env.execute(subtask) {
            Ok(o) => o,
            Err(e) => {
                trace.retries = retry;
                trace.goal_reached = env.goal_reached(task);
                return Err(EpisodeError {
                    trace,
                    source: PlannerError::Environment(Box::new(e)),
                });
            }
        };
        let ground_truth = env.ground_truth(subtask);
        let mut query = DetectionQuery::new(shared.clone(), subtask.clone(), observation, trace.steps.len());
        query.episode_id = ctx.episode_id.clone();
        let verdict = match detector.detect(&query) {
            Ok(v) => v,
            Err(DetectorError::EscalationExpired(id)) => {
                tracing::warn!(escalation = %id, "operator did not answer; aborting episode");
                trace.retries = retry;
                trace.final_status = FinalStatus::AbortedOperator;
                trace.goal_reached = env.goal_reached(task);
                return Ok(trace);
            }
            Err(e) => {
                trace.retries = retry;
                trace.goal_reached = env.goal_reached(task);
                return Err(EpisodeError {
                    trace,
                    source: PlannerError::Detector(e),
                });
            }
        };
        match verdict.source() {
            VerdictSource::Human => trace.human_queries += 1,
            VerdictSource::Model => trace.model_queries += 1,
        }
        let success = verdict.outcome().is_success();
        let step = StepRecord {
            subtask_index: index,
            execution_result: ExecutionResult {
                observation: query.observation,
                ground_truth,
            },
            verdict,
            retry_count_at_step: retry,
        };
        if let Some(hook) = ctx.on_step.as_mut() {
            hook(&step);
        }
        trace.steps.push(step);
        if success {
            index += 1;
        } else {
            index = 0;
            retry += 1;
        }
    }
    trace.retries = retry;
    trace.final_status = if index == n {
        FinalStatus::Success
    } else {
        FinalStatus::AbortedRetriesExhausted
    };
    trace.goal_reached = env.goal_reached(task);
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::ScriptedDetector;
    use crate::domain::validate_trace;
    use Outcome::{Failure as F, Success as S};

    /// Environment that records executions and never fails.
    #[derive(Default)]
    struct Recorder {
        executed: Vec<usize>,
    }

    impl TaskEnvironment for Recorder {
        type Error = SimError;

        fn reset(&mut self) -> Observation {
            Observation::sim_state(EnvState::default(), 0)
        }

        fn execute(&mut self, subtask: &Subtask) -> Result<Observation, SimError> {
            self.executed.push(subtask.index);
            Ok(Observation::sim_state(EnvState::default(), self.executed.len() as i64))
        }
    }

    fn task(n: usize) -> TaskSpec {
        TaskSpec {
            id: "t".into(),
            instruction: "do it".into(),
            subtasks: (0..n)
                .map(|i| Subtask::new(i, format!("step {i}"), format!("state {i}")))
                .collect(),
        }
    }

    fn run(n: usize, k: usize, verdicts: &[Outcome]) -> (EpisodeTrace, Vec<usize>) {
        let mut env = Recorder::default();
        let det = ScriptedDetector::from_outcomes(verdicts.iter().copied());
        let trace = run_episode(&task(n), &mut env, &det, k, EpisodeContext::default()).unwrap();
        assert!(validate_trace(&trace, n, k).is_empty(), "{:?}", validate_trace(&trace, n, k));
        (trace, env.executed)
    }

    #[test]
    fn happy_path() {
        let (trace, executed) = run(3, 3, &[S, S, S]);
        assert_eq!(executed, vec![0, 1, 2]);
        assert_eq!(trace.final_status, FinalStatus::Success);
        assert_eq!(trace.retries, 0);
        assert_eq!(trace.model_queries, 3);
    }

    #[test]
    fn always_failure_exhausts_retries() {
        let (trace, executed) = run(3, 3, &[F, F, F]);
        assert_eq!(executed, vec![0, 0, 0]);
        assert_eq!(trace.final_status, FinalStatus::AbortedRetriesExhausted);
        assert_eq!(trace.retries, 3);
    }

    #[test]
    fn restart_after_failure() {
        let (trace, executed) = run(3, 3, &[S, F, S, S, S]);
        assert_eq!(executed, vec![0, 1, 0, 1, 2]);
        assert_eq!(trace.final_status, FinalStatus::Success);
        assert_eq!(trace.retries, 1);
    }

    #[test]
    fn zero_budget_executes_nothing() {
        let (trace, executed) = run(3, 0, &[]);
        assert!(executed.is_empty());
        assert_eq!(trace.final_status, FinalStatus::AbortedRetriesExhausted);
    }

    #[test]
    fn step_hook_sees_every_step() {
        let mut seen = Vec::new();
        let mut hook = |s: &StepRecord| seen.push(s.subtask_index);
        let det = ScriptedDetector::from_outcomes([S, F, S, S, S]);
        let ctx = EpisodeContext {
            episode_id: Some("ep".into()),
            on_step: Some(&mut hook),
        };
        run_episode(&task(3), &mut Recorder::default(), &det, 3, ctx).unwrap();
        assert_eq!(seen, vec![0, 1, 0, 1, 2]);
    }

    #[test]
    fn detector_error_keeps_partial_trace() {
        let det = ScriptedDetector::from_outcomes([S]);
        let err = run_episode(&task(3), &mut Recorder::default(), &det, 3, EpisodeContext::default()).unwrap_err();
        assert_eq!(err.trace.steps.len(), 1);
        assert!(matches!(err.source, PlannerError::Detector(_)));
    }

    #[test]
    fn invalid_task_rejected() {
        let det = ScriptedDetector::default();
        let err = run_episode(&task(0), &mut Recorder::default(), &det, 3, EpisodeContext::default()).unwrap_err();
        assert!(matches!(err.source, PlannerError::InvalidTask(_)));
    }

    #[test]
    fn oracle_detector_in_sim() {
        let spec = TaskSpec {
            id: "pick_place".into(),
            instruction: "put the mouse on the notebook".into(),
            subtasks: vec![
                Subtask::new(0, "pick up the mouse", "the gripper holds the mouse"),
                Subtask::new(1, "place the mouse on the notebook", "the mouse is on the notebook"),
            ],
        };
        let initial = EnvState::default()
            .with_object("mouse", "table")
            .with_object("notebook", "table");
        let mut cfg = SimEnvConfig::new(initial, 11);
        cfg.default_success_prob = 0.7;
        let mut env = SimEnv::new(cfg).with_clock(Clock::Logical);
        let trace = run_episode(&spec, &mut env, &OracleDetector, 50, EpisodeContext::default()).unwrap();
        assert_eq!(trace.final_status, FinalStatus::Success);
        assert_eq!(trace.goal_reached, Some(true));
        for step in &trace.steps {
            assert_eq!(step.execution_result.ground_truth, Some(step.verdict.outcome()));
        }
    }
}
