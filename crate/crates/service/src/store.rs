//! Episode registry with append-only JSON-lines logs.
//!
//! Each episode owns `{data_dir}/episodes/{id}.jsonl`, one [`EpisodeEvent`]
//! per line. The log is the source of truth: on startup every log is
//! replayed, and an episode whose log has no `finished` event (the process
//! died mid-run) is closed as `aborted_operator`.

use std::collections::HashMap;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use tokio::sync::watch;

use loopguard_core::domain::{EpisodeTrace, FinalStatus, StepRecord, VerdictSource};
use loopguard_core::prompting::StrategyKind;
use loopguard_core::uncertainty::Method;

pub fn now_millis() -> i64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as i64)
        .unwrap_or(0)
}

/// Effective settings of one episode after overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSettings {
    pub strategy: StrategyKind,
    pub method: Method,
    pub threshold: f64,
    pub max_retries: usize,
    pub escalation_timeout_ms: u64,
    pub env_seed: u64,
    pub model_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EventKind {
    Started {
        task_id: String,
        settings: EpisodeSettings,
    },
    Escalated {
        escalation_id: String,
        subtask_index: usize,
        uncertainty: f64,
    },
    Step {
        step: StepRecord,
    },
    Finished {
        status: EpisodeStatus,
        trace: EpisodeTrace,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        error: Option<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeEvent {
    /// Position in the episode's event stream; the long-poll cursor.
    pub seq: usize,
    pub at: i64,
    #[serde(flatten)]
    pub kind: EventKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpisodeStatus {
    Running,
    Success,
    AbortedRetriesExhausted,
    AbortedOperator,
    /// Stopped on a backend or environment error.
    Failed,
}

impl From<FinalStatus> for EpisodeStatus {
    fn from(s: FinalStatus) -> Self {
        match s {
            FinalStatus::Success => EpisodeStatus::Success,
            FinalStatus::AbortedRetriesExhausted => EpisodeStatus::AbortedRetriesExhausted,
            FinalStatus::AbortedOperator => EpisodeStatus::AbortedOperator,
        }
    }
}

/// What `GET /episodes/{id}` returns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeView {
    pub id: String,
    pub task_id: String,
    pub status: EpisodeStatus,
    pub created_at: i64,
    pub settings: EpisodeSettings,
    pub steps: Vec<StepRecord>,
    pub human_queries: usize,
    pub model_queries: usize,
    pub retries: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub goal_reached: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pending_escalation: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("episode log {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("episode log {path}:{line}: {message}")]
    Corrupt { path: String, line: usize, message: String },
}

struct Episode {
    task_id: String,
    created_at: i64,
    settings: EpisodeSettings,
    events: Vec<EpisodeEvent>,
    log: PathBuf,
    notify: watch::Sender<usize>,
}

impl Episode {
    fn finished(&self) -> Option<&EventKind> {
        self.events
            .iter()
            .rev()
            .map(|e| &e.kind)
            .find(|k| matches!(k, EventKind::Finished { .. }))
    }

    fn view(&self, id: &str) -> EpisodeView {
        let steps: Vec<StepRecord> = self
            .events
            .iter()
            .filter_map(|e| match &e.kind {
                EventKind::Step { step } => Some(step.clone()),
                _ => None,
            })
            .collect();
        let partial = trace_from_steps(&self.task_id, &steps, FinalStatus::AbortedOperator);
        let (status, retries, goal_reached, error) = match self.finished() {
            Some(EventKind::Finished { status, trace, error }) => (*status, trace.retries, trace.goal_reached, error.clone()),
            _ => (EpisodeStatus::Running, partial.retries, None, None),
        };
        // the step event follows the answer, so a trailing escalation is open
        let pending_escalation = match (status, self.events.last().map(|e| &e.kind)) {
            (EpisodeStatus::Running, Some(EventKind::Escalated { escalation_id, .. })) => Some(escalation_id.clone()),
            _ => None,
        };
        EpisodeView {
            id: id.to_string(),
            task_id: self.task_id.clone(),
            status,
            created_at: self.created_at,
            settings: self.settings.clone(),
            human_queries: partial.human_queries,
            model_queries: partial.model_queries,
            steps,
            retries,
            goal_reached,
            pending_escalation,
            error,
        }
    }
}

/// Rebuilds counters from recorded steps by replaying the loop.
pub fn trace_from_steps(task_id: &str, steps: &[StepRecord], status: FinalStatus) -> EpisodeTrace {
    let human = steps
        .iter()
        .filter(|s| s.verdict.source() == VerdictSource::Human)
        .count();
    let retries = steps.iter().filter(|s| !s.verdict.outcome().is_success()).count();
    EpisodeTrace {
        task_id: task_id.to_string(),
        steps: steps.to_vec(),
        final_status: status,
        human_queries: human,
        model_queries: steps.len() - human,
        retries,
        goal_reached: None,
    }
}

/// Concurrency-safe registry of episodes backed by log files.
pub struct EpisodeStore {
    dir: PathBuf,
    episodes: Mutex<HashMap<String, Episode>>,
    order: Mutex<Vec<String>>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn append(path: &Path, event: &EpisodeEvent) -> Result<(), StoreError> {
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(io_err(path))?;
    let line = serde_json::to_string(event).expect("events serialize");
    writeln!(file, "{line}").map_err(io_err(path))
}

impl EpisodeStore {
    /// Opens `{data_dir}/episodes`, replaying every log found there.
    pub fn open(data_dir: impl AsRef<Path>) -> Result<Arc<Self>, StoreError> {
        let dir = data_dir.as_ref().join("episodes");
        std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let store = Arc::new(Self {
            dir: dir.clone(),
            episodes: Mutex::new(HashMap::new()),
            order: Mutex::new(Vec::new()),
        });
        let mut logs: Vec<PathBuf> = std::fs::read_dir(&dir)
            .map_err(io_err(&dir))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
            .collect();
        logs.sort();
        let mut loaded = Vec::new();
        for path in logs {
            if let Some((id, ep)) = store.replay(&path)? {
                loaded.push((ep.created_at, id, ep));
            }
        }
        loaded.sort_by(|a, b| (a.0, &a.1).cmp(&(b.0, &b.1)));
        {
            let mut episodes = store.lock();
            let mut order = store.order.lock().unwrap_or_else(|e| e.into_inner());
            for (_, id, ep) in loaded {
                order.push(id.clone());
                episodes.insert(id, ep);
            }
        }
        Ok(store)
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, HashMap<String, Episode>> {
        self.episodes.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn replay(&self, path: &Path) -> Result<Option<(String, Episode)>, StoreError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let mut events = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let event: EpisodeEvent = serde_json::from_str(line).map_err(|e| StoreError::Corrupt {
                path: path.display().to_string(),
                line: i + 1,
                message: e.to_string(),
            })?;
            events.push(event);
        }
        let Some(EpisodeEvent {
            at,
            kind: EventKind::Started { task_id, settings },
            ..
        }) = events.first().cloned()
        else {
            tracing::warn!(path = %path.display(), "skipping episode log without a start event");
            return Ok(None);
        };
        let id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let (notify, _) = watch::channel(events.len());
        let mut ep = Episode {
            task_id,
            created_at: at,
            settings,
            events,
            log: path.to_path_buf(),
            notify,
        };
        if ep.finished().is_none() {
            let steps: Vec<StepRecord> = ep
                .events
                .iter()
                .filter_map(|e| match &e.kind {
                    EventKind::Step { step } => Some(step.clone()),
                    _ => None,
                })
                .collect();
            let event = EpisodeEvent {
                seq: ep.events.len(),
                at: now_millis(),
                kind: EventKind::Finished {
                    status: EpisodeStatus::AbortedOperator,
                    trace: trace_from_steps(&ep.task_id, &steps, FinalStatus::AbortedOperator),
                    error: Some("service stopped while the episode was running".into()),
                },
            };
            append(path, &event)?;
            ep.events.push(event);
            tracing::info!(episode = %id, "closed interrupted episode as aborted_operator");
        }
        Ok(Some((id, ep)))
    }

    /// Registers a new episode and writes its start event.
    pub fn create(&self, id: &str, task_id: &str, settings: EpisodeSettings) -> Result<(), StoreError> {
        let log = self.dir.join(format!("{id}.jsonl"));
        let at = now_millis();
        let start = EpisodeEvent {
            seq: 0,
            at,
            kind: EventKind::Started {
                task_id: task_id.to_string(),
                settings: settings.clone(),
            },
        };
        append(&log, &start)?;
        let (notify, _) = watch::channel(1);
        self.lock().insert(
            id.to_string(),
            Episode {
                task_id: task_id.to_string(),
                created_at: at,
                settings,
                events: vec![start],
                log,
                notify,
            },
        );
        self.order.lock().unwrap_or_else(|e| e.into_inner()).push(id.to_string());
        Ok(())
    }

    /// Appends an event, persisting it before it becomes visible.
    pub fn push(&self, id: &str, kind: EventKind) -> Result<(), StoreError> {
        let mut episodes = self.lock();
        let Some(ep) = episodes.get_mut(id) else {
            return Ok(());
        };
        let event = EpisodeEvent {
            seq: ep.events.len(),
            at: now_millis(),
            kind,
        };
        append(&ep.log, &event)?;
        ep.events.push(event);
        ep.notify.send_replace(ep.events.len());
        Ok(())
    }

    pub fn view(&self, id: &str) -> Option<EpisodeView> {
        self.lock().get(id).map(|ep| ep.view(id))
    }

    /// Every episode, oldest first.
    pub fn views(&self) -> Vec<EpisodeView> {
        let order = self.order.lock().unwrap_or_else(|e| e.into_inner()).clone();
        let episodes = self.lock();
        order
            .iter()
            .filter_map(|id| episodes.get(id).map(|ep| ep.view(id)))
            .collect()
    }

    /// Events from `cursor` on, and whether the episode has finished.
    pub fn events_since(&self, id: &str, cursor: usize) -> Option<(Vec<EpisodeEvent>, bool)> {
        let episodes = self.lock();
        let ep = episodes.get(id)?;
        let events = ep.events.get(cursor..).map(<[_]>::to_vec).unwrap_or_default();
        Some((events, ep.finished().is_some()))
    }

    pub fn subscribe(&self, id: &str) -> Option<watch::Receiver<usize>> {
        self.lock().get(id).map(|ep| ep.notify.subscribe())
    }

    /// Final traces of finished, non-failed episodes.
    pub fn finished_traces(&self) -> Vec<EpisodeTrace> {
        let episodes = self.lock();
        let order = self.order.lock().unwrap_or_else(|e| e.into_inner());
        order
            .iter()
            .filter_map(|id| episodes.get(id))
            .filter_map(|ep| match ep.finished() {
                Some(EventKind::Finished { status, trace, .. }) if *status != EpisodeStatus::Failed => {
                    Some(trace.clone())
                }
                _ => None,
            })
            .collect()
    }

    pub fn running(&self) -> usize {
        self.lock().values().filter(|ep| ep.finished().is_none()).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use loopguard_core::domain::{ExecutionResult, Observation, Outcome, Verdict};

    fn settings() -> EpisodeSettings {
        EpisodeSettings {
            strategy: StrategyKind::Ssc,
            method: Method::Entropy,
            threshold: 0.6,
            max_retries: 3,
            escalation_timeout_ms: 0,
            env_seed: 1,
            model_seed: 2,
        }
    }

    fn step(index: usize, outcome: Outcome, retry: usize) -> StepRecord {
        StepRecord {
            subtask_index: index,
            execution_result: ExecutionResult {
                observation: Observation::image("x.png", 0),
                ground_truth: None,
            },
            verdict: Verdict::human(outcome),
            retry_count_at_step: retry,
        }
    }

    #[test]
    fn interrupted_episode_closes_on_reload() {
        let dir = tempfile::tempdir().unwrap();
        {
            let store = EpisodeStore::open(dir.path()).unwrap();
            store.create("e1", "open_drawer", settings()).unwrap();
            store.push("e1", EventKind::Step { step: step(0, Outcome::Failure, 0) }).unwrap();
            assert_eq!(store.view("e1").unwrap().status, EpisodeStatus::Running);
            assert_eq!(store.running(), 1);
        }
        let store = EpisodeStore::open(dir.path()).unwrap();
        let view = store.view("e1").unwrap();
        assert_eq!(view.status, EpisodeStatus::AbortedOperator);
        assert_eq!(view.steps.len(), 1);
        assert_eq!(view.retries, 1);
        assert_eq!(view.human_queries, 1);
        // the closing event is persisted, so a second reload adds nothing
        let (events, done) = store.events_since("e1", 0).unwrap();
        assert!(done);
        drop(store);
        let again = EpisodeStore::open(dir.path()).unwrap();
        assert_eq!(again.events_since("e1", 0).unwrap().0, events);
    }

    #[test]
    fn cursor_is_monotone() {
        let dir = tempfile::tempdir().unwrap();
        let store = EpisodeStore::open(dir.path()).unwrap();
        store.create("e", "t", settings()).unwrap();
        store.push("e", EventKind::Step { step: step(0, Outcome::Success, 0) }).unwrap();
        let (all, _) = store.events_since("e", 0).unwrap();
        assert_eq!(all.iter().map(|e| e.seq).collect::<Vec<_>>(), vec![0, 1]);
        assert_eq!(store.events_since("e", 1).unwrap().0.len(), 1);
        assert!(store.events_since("e", 7).unwrap().0.is_empty());
        assert!(store.events_since("missing", 0).is_none());
    }

    #[test]
    fn corrupt_log_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("episodes")).unwrap();
        std::fs::write(dir.path().join("episodes/bad.jsonl"), "{not json\n").unwrap();
        assert!(matches!(EpisodeStore::open(dir.path()), Err(StoreError::Corrupt { line: 1, .. })));
    }
}
