//! Human escalation: requests, the shared blocking queue, and channels.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::DetectionQuery;
use crate::domain::Outcome;
use crate::uncertainty::UncertaintyEstimate;

/// Question shown to the operator.
pub const ESCALATION_PROMPT: &str = "I am not sure! The current subtask is successful or failed? ";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Resolution {
    pub outcome: Outcome,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub operator_note: Option<String>,
}

/// Lifecycle of a request. A resolution exists exactly when resolved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum EscalationState {
    Pending,
    Resolved { resolution: Resolution },
    Expired,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EscalationRequest {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub episode_id: Option<String>,
    pub query: DetectionQuery,
    pub model_reply: String,
    pub estimate: UncertaintyEstimate,
    pub created_at: i64,
    #[serde(flatten)]
    pub state: EscalationState,
}

impl EscalationRequest {
    pub fn new(query: DetectionQuery, model_reply: String, estimate: UncertaintyEstimate) -> Self {
        Self {
            id: uuid::Uuid::new_v4().to_string(),
            episode_id: query.episode_id.clone(),
            query,
            model_reply,
            estimate,
            created_at: crate::now_millis(),
            state: EscalationState::Pending,
        }
    }

    pub fn is_pending(&self) -> bool {
        self.state == EscalationState::Pending
    }

    pub fn resolution(&self) -> Option<&Resolution> {
        match &self.state {
            EscalationState::Resolved { resolution } => Some(resolution),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EscalationError {
    #[error("escalation {0} not found")]
    NotFound(String),
    /// Carries the request as it stands, including the winning resolution.
    #[error("escalation {} already resolved", .0.id)]
    AlreadyResolved(Box<EscalationRequest>),
    #[error("escalation {} expired", .0.id)]
    Expired(Box<EscalationRequest>),
    #[error("episode {0} already has a pending escalation")]
    EpisodePending(String),
    #[error("operator channel: {0}")]
    Channel(String),
}

/// Where escalations go. `ask` blocks until a human answers or `timeout`
/// (`None` = forever) elapses.
pub trait EscalationChannel: Send + Sync {
    fn ask(&self, request: EscalationRequest, timeout: Option<Duration>) -> Result<Resolution, EscalationError>;
}

#[derive(Default)]
struct QueueInner {
    requests: HashMap<String, EscalationRequest>,
    order: Vec<String>,
}

/// Shared rendezvous between blocked detectors and operators (HTTP, console).
#[derive(Default)]
pub struct EscalationQueue {
    inner: Mutex<QueueInner>,
    changed: Condvar,
}

impl EscalationQueue {
    pub fn new() -> Self {
        Self::default()
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, QueueInner> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Registers a pending request; an episode may have at most one.
    pub fn submit(&self, request: EscalationRequest) -> Result<String, EscalationError> {
        let mut inner = self.lock();
        if let Some(ep) = &request.episode_id {
            let busy = inner
                .requests
                .values()
                .any(|r| r.is_pending() && r.episode_id.as_ref() == Some(ep));
            if busy {
                return Err(EscalationError::EpisodePending(ep.clone()));
            }
        }
        let id = request.id.clone();
        inner.order.push(id.clone());
        inner.requests.insert(id.clone(), request);
        self.changed.notify_all();
        Ok(id)
    }

    /// Blocks until `id` leaves the pending state. On timeout the request
    /// becomes expired.
    pub fn wait(&self, id: &str, timeout: Option<Duration>) -> Result<Resolution, EscalationError> {
        let deadline = timeout.map(|t| Instant::now() + t);
        let mut inner = self.lock();
        loop {
            let req = inner
                .requests
                .get_mut(id)
                .ok_or_else(|| EscalationError::NotFound(id.to_string()))?;
            match &req.state {
                EscalationState::Resolved { resolution } => return Ok(resolution.clone()),
                EscalationState::Expired => return Err(EscalationError::Expired(Box::new(req.clone()))),
                EscalationState::Pending => {}
            }
            match deadline {
                None => {
                    inner = self.changed.wait(inner).unwrap_or_else(|e| e.into_inner());
                }
                Some(deadline) => {
                    let now = Instant::now();
                    if now >= deadline {
                        req.state = EscalationState::Expired;
                        let snapshot = req.clone();
                        self.changed.notify_all();
                        return Err(EscalationError::Expired(Box::new(snapshot)));
                    }
                    inner = self
                        .changed
                        .wait_timeout(inner, deadline - now)
                        .unwrap_or_else(|e| e.into_inner())
                        .0;
                }
            }
        }
    }

    /// First resolution wins; later ones get `AlreadyResolved` with the
    /// stored outcome.
    pub fn resolve(&self, id: &str, outcome: Outcome, note: Option<String>) -> Result<EscalationRequest, EscalationError> {
        let mut inner = self.lock();
        let req = inner
            .requests
            .get_mut(id)
            .ok_or_else(|| EscalationError::NotFound(id.to_string()))?;
        match req.state {
            EscalationState::Pending => {
                req.state = EscalationState::Resolved {
                    resolution: Resolution {
                        outcome,
                        operator_note: note,
                    },
                };
                let out = req.clone();
                self.changed.notify_all();
                Ok(out)
            }
            EscalationState::Resolved { .. } => Err(EscalationError::AlreadyResolved(Box::new(req.clone()))),
            EscalationState::Expired => Err(EscalationError::Expired(Box::new(req.clone()))),
        }
    }

    /// Marks every pending request of `episode_id` expired.
    pub fn expire_episode(&self, episode_id: &str) {
        let mut inner = self.lock();
        for req in inner.requests.values_mut() {
            if req.is_pending() && req.episode_id.as_deref() == Some(episode_id) {
                req.state = EscalationState::Expired;
            }
        }
        self.changed.notify_all();
    }

    /// Marks every pending request expired, releasing all waiters.
    pub fn expire_all(&self) {
        let mut inner = self.lock();
        for req in inner.requests.values_mut() {
            if req.is_pending() {
                req.state = EscalationState::Expired;
            }
        }
        self.changed.notify_all();
    }

    /// Pending requests, oldest first.
    pub fn pending(&self) -> Vec<EscalationRequest> {
        let inner = self.lock();
        inner
            .order
            .iter()
            .filter_map(|id| inner.requests.get(id))
            .filter(|r| r.is_pending())
            .cloned()
            .collect()
    }

    pub fn get(&self, id: &str) -> Option<EscalationRequest> {
        self.lock().requests.get(id).cloned()
    }

    /// Blocks until at least one request is pending or `timeout` elapses.
    pub fn wait_for_pending(&self, timeout: Duration) -> Vec<EscalationRequest> {
        let deadline = Instant::now() + timeout;
        loop {
            let pending = self.pending();
            let now = Instant::now();
            if !pending.is_empty() || now >= deadline {
                return pending;
            }
            let inner = self.lock();
            let _ = self.changed.wait_timeout(inner, deadline - now);
        }
    }
}

impl EscalationChannel for EscalationQueue {
    fn ask(&self, request: EscalationRequest, timeout: Option<Duration>) -> Result<Resolution, EscalationError> {
        let id = self.submit(request)?;
        self.wait(&id, timeout)
    }
}

impl<C: EscalationChannel + ?Sized> EscalationChannel for std::sync::Arc<C> {
    fn ask(&self, request: EscalationRequest, timeout: Option<Duration>) -> Result<Resolution, EscalationError> {
        (**self).ask(request, timeout)
    }
}

/// Interactive operator on a terminal. Timeouts are not supported; the
/// prompt blocks until a valid answer or end of input.
pub struct TerminalChannel<R, W> {
    io: Mutex<(R, W)>,
}

impl TerminalChannel<std::io::BufReader<std::io::Stdin>, std::io::Stderr> {
    pub fn stdio() -> Self {
        Self::new(std::io::BufReader::new(std::io::stdin()), std::io::stderr())
    }
}

impl<R: BufRead, W: Write> TerminalChannel<R, W> {
    pub fn new(input: R, output: W) -> Self {
        Self {
            io: Mutex::new((input, output)),
        }
    }

    pub fn into_parts(self) -> (R, W) {
        self.io.into_inner().unwrap_or_else(|e| e.into_inner())
    }
}

impl<R: BufRead + Send, W: Write + Send> EscalationChannel for TerminalChannel<R, W> {
    fn ask(&self, request: EscalationRequest, _timeout: Option<Duration>) -> Result<Resolution, EscalationError> {
        let mut io = self.io.lock().unwrap_or_else(|e| e.into_inner());
        let (input, output) = &mut *io;
        let io_err = |e: std::io::Error| EscalationError::Channel(e.to_string());
        writeln!(
            output,
            "[{}] subtask {}: {} (uncertainty {:.3}, {})",
            request.query.task.id,
            request.query.subtask.index,
            request.query.subtask.description,
            request.estimate.value(),
            request.estimate.method()
        )
        .map_err(io_err)?;
        loop {
            write!(output, "{ESCALATION_PROMPT}").map_err(io_err)?;
            output.flush().map_err(io_err)?;
            let mut line = String::new();
            if input.read_line(&mut line).map_err(io_err)? == 0 {
                return Err(EscalationError::Channel("operator input closed".into()));
            }
            match line.parse::<Outcome>() {
                Ok(outcome) => {
                    return Ok(Resolution {
                        outcome,
                        operator_note: None,
                    })
                }
                Err(e) => writeln!(output, "{e}").map_err(io_err)?,
            }
        }
    }
}

/// Channel answered by a function, e.g. a ground-truth oracle standing in
/// for the operator in simulation.
pub struct FnChannel<F>(pub F);

impl<F> EscalationChannel for FnChannel<F>
where
    F: Fn(&EscalationRequest) -> Outcome + Send + Sync,
{
    fn ask(&self, request: EscalationRequest, _timeout: Option<Duration>) -> Result<Resolution, EscalationError> {
        Ok(Resolution {
            outcome: (self.0)(&request),
            operator_note: None,
        })
    }
}
