//! Simulated tabletop: objects, fixtures (drawers), and a gripper, with
//! seeded stochastic execution of pick / place / open / close.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::TaskEnvironment;
use crate::detector::{DetectionQuery, DetectorError, FailureDetector};
use crate::domain::{Action, LoadError, Observation, Outcome, Subtask, TaskSpec, Verb, Verdict};
use crate::uncertainty::{renormalize, token_probability_uncertainty, OptionProb};

pub const GRIPPER: &str = "gripper";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectState {
    /// Symbolic location: another object, a fixture, or `gripper`.
    pub position: String,
    #[serde(default)]
    pub held: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GripperState {
    #[serde(default)]
    pub holding: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvState {
    #[serde(default)]
    pub objects: BTreeMap<String, ObjectState>,
    /// Fixture id to state, e.g. `upper_drawer -> open`.
    #[serde(default)]
    pub fixtures: BTreeMap<String, String>,
    #[serde(default)]
    pub gripper: GripperState,
}

impl EnvState {
    pub fn with_object(mut self, id: &str, position: &str) -> Self {
        self.objects.insert(
            id.to_string(),
            ObjectState {
                position: position.to_string(),
                held: false,
            },
        );
        self
    }

    pub fn with_fixture(mut self, id: &str, state: &str) -> Self {
        self.fixtures.insert(id.to_string(), state.to_string());
        self
    }

    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        let held: Vec<&String> = self
            .objects
            .iter()
            .filter(|(_, o)| o.held)
            .map(|(id, _)| id)
            .collect();
        if held.len() > 1 {
            out.push(format!("more than one object held: {held:?}"));
        }
        for (id, o) in &self.objects {
            if o.held && o.position != GRIPPER {
                out.push(format!("held object {id} not at gripper"));
            }
        }
        if held.first().map(|s| s.as_str()) != self.gripper.holding.as_deref() {
            out.push("gripper.holding disagrees with held objects".into());
        }
        out
    }

    fn release(&mut self) {
        if let Some(obj) = self.gripper.holding.take() {
            if let Some(o) = self.objects.get_mut(&obj) {
                o.held = false;
            }
        }
    }

    /// Moves `object` to `to`, dropping it from the gripper if held.
    pub fn displace(&mut self, object: &str, to: &str) {
        if self.gripper.holding.as_deref() == Some(object) {
            self.release();
        }
        if let Some(o) = self.objects.get_mut(object) {
            o.position = to.to_string();
            o.held = false;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SimError {
    #[error("unknown action: {0}")]
    UnknownAction(String),
}

fn resolve(state: &EnvState, action: &Action) -> Result<(), SimError> {
    let unknown = |what: &str| SimError::UnknownAction(format!("{:?} on unknown {what}", action.verb));
    match action.verb {
        Verb::Pick | Verb::Place => {
            if !state.objects.contains_key(&action.object) {
                return Err(unknown(&action.object));
            }
        }
        Verb::Open | Verb::Close => {
            if !state.fixtures.contains_key(&action.object) {
                return Err(unknown(&action.object));
            }
        }
    }
    if action.verb == Verb::Place {
        let target = action
            .target
            .as_deref()
            .ok_or_else(|| SimError::UnknownAction("place without target".into()))?;
        if !state.objects.contains_key(target) && !state.fixtures.contains_key(target) {
            return Err(unknown(target));
        }
    }
    Ok(())
}

/// Attempts `action`. One uniform draw is consumed per call so the random
/// stream stays aligned with the call sequence. Returns the new state and
/// whether the action's effect holds afterwards.
pub fn sim_execute<R: Rng + ?Sized>(
    state: &EnvState,
    action: &Action,
    success_prob: f64,
    rng: &mut R,
) -> Result<(EnvState, bool), SimError> {
    resolve(state, action)?;
    let attempt_ok = rng.random::<f64>() < success_prob;
    let mut next = state.clone();
    let obj = action.object.as_str();
    let ok = match action.verb {
        Verb::Pick => {
            if next.gripper.holding.as_deref() == Some(obj) {
                true
            } else if next.gripper.holding.is_some() || !attempt_ok {
                false
            } else {
                next.gripper.holding = Some(obj.to_string());
                let o = next.objects.get_mut(obj).expect("resolved");
                o.held = true;
                o.position = GRIPPER.to_string();
                true
            }
        }
        Verb::Place => {
            let target = action.target.as_deref().expect("resolved");
            let closed_target = next.fixtures.get(target).is_some_and(|s| s == "closed");
            if next.gripper.holding.as_deref() != Some(obj) || closed_target || !attempt_ok {
                false
            } else {
                next.release();
                next.objects.get_mut(obj).expect("resolved").position = target.to_string();
                true
            }
        }
        Verb::Open | Verb::Close => {
            if attempt_ok {
                let to = if action.verb == Verb::Open { "open" } else { "closed" };
                next.fixtures.insert(obj.to_string(), to.to_string());
            }
            attempt_ok
        }
    };
    Ok((next, ok))
}

/// Evaluates the post-condition of `action` against `state`.
pub fn ground_truth_check(state: &EnvState, action: &Action) -> Result<Outcome, SimError> {
    resolve(state, action)?;
    let obj = action.object.as_str();
    let holds = match action.verb {
        Verb::Pick => state.gripper.holding.as_deref() == Some(obj),
        Verb::Place => {
            let o = &state.objects[obj];
            !o.held && Some(o.position.as_str()) == action.target.as_deref()
        }
        Verb::Open => state.fixtures.get(obj).is_some_and(|s| s == "open"),
        Verb::Close => state.fixtures.get(obj).is_some_and(|s| s == "closed"),
    };
    Ok(Outcome::from_bool(holds))
}

/// Moves an object right after the given execution (1-based count),
/// before the observation is captured.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Perturbation {
    pub after_execution: usize,
    pub object: String,
    pub to: String,
}

fn default_prob() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimEnvConfig {
    pub initial_state: EnvState,
    /// Per-subtask execution success probability, keyed by subtask index.
    #[serde(default)]
    pub per_subtask_success_prob: BTreeMap<usize, f64>,
    /// Used for subtasks missing from the map.
    #[serde(default = "default_prob")]
    pub default_success_prob: f64,
    #[serde(default)]
    pub rng_seed: u64,
    #[serde(default)]
    pub perturbations: Vec<Perturbation>,
}

impl SimEnvConfig {
    pub fn new(initial_state: EnvState, rng_seed: u64) -> Self {
        Self {
            initial_state,
            per_subtask_success_prob: BTreeMap::new(),
            default_success_prob: 1.0,
            rng_seed,
            perturbations: Vec::new(),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, LoadError> {
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

    pub fn violations(&self) -> Vec<String> {
        let mut out = self.initial_state.violations();
        let probs = self
            .per_subtask_success_prob
            .iter()
            .map(|(k, p)| (format!("subtask {k}"), *p))
            .chain(std::iter::once(("default".to_string(), self.default_success_prob)));
        for (what, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                out.push(format!("{what} success probability {p} outside [0,1]"));
            }
        }
        out
    }

    pub fn success_prob(&self, index: usize) -> f64 {
        self.per_subtask_success_prob
            .get(&index)
            .copied()
            .unwrap_or(self.default_success_prob)
    }
}

/// Source of observation timestamps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Clock {
    Wall,
    /// Timestamp equals the number of executions so far; makes traces
    /// bit-reproducible.
    Logical,
}

type Hook = Box<dyn FnMut(usize, &mut EnvState) + Send>;

pub struct SimEnv {
    config: SimEnvConfig,
    state: EnvState,
    rng: ChaCha8Rng,
    executions: usize,
    clock: Clock,
    hook: Option<Hook>,
}

impl SimEnv {
    pub fn new(config: SimEnvConfig) -> Self {
        Self {
            state: config.initial_state.clone(),
            rng: ChaCha8Rng::seed_from_u64(config.rng_seed),
            config,
            executions: 0,
            clock: Clock::Wall,
            hook: None,
        }
    }

    pub fn with_clock(mut self, clock: Clock) -> Self {
        self.clock = clock;
        self
    }

    /// Runs `hook(execution_count, state)` after every execution, before the
    /// observation is taken.
    pub fn with_perturbation_hook(mut self, hook: impl FnMut(usize, &mut EnvState) + Send + 'static) -> Self {
        self.hook = Some(Box::new(hook));
        self
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    pub fn executions(&self) -> usize {
        self.executions
    }

    fn observe(&self) -> Observation {
        let at = match self.clock {
            Clock::Wall => crate::now_millis(),
            Clock::Logical => self.executions as i64,
        };
        Observation::sim_state(self.state.clone(), at)
    }

    fn action_of(subtask: &Subtask) -> Result<Action, SimError> {
        subtask
            .resolve_action()
            .ok_or_else(|| SimError::UnknownAction(subtask.description.clone()))
    }
}

impl TaskEnvironment for SimEnv {
    type Error = SimError;

    fn reset(&mut self) -> Observation {
        self.state = self.config.initial_state.clone();
        self.rng = ChaCha8Rng::seed_from_u64(self.config.rng_seed);
        self.executions = 0;
        self.observe()
    }

    fn execute(&mut self, subtask: &Subtask) -> Result<Observation, SimError> {
        let action = Self::action_of(subtask)?;
        let p = self.config.success_prob(subtask.index);
        let (next, _) = sim_execute(&self.state, &action, p, &mut self.rng)?;
        self.state = next;
        self.executions += 1;
        for pert in self
            .config
            .perturbations
            .iter()
            .filter(|p| p.after_execution == self.executions)
        {
            self.state.displace(&pert.object, &pert.to);
        }
        if let Some(hook) = self.hook.as_mut() {
            hook(self.executions, &mut self.state);
        }
        Ok(self.observe())
    }

    fn ground_truth(&self, subtask: &Subtask) -> Option<Outcome> {
        let action = Self::action_of(subtask).ok()?;
        ground_truth_check(&self.state, &action).ok()
    }

    fn goal_reached(&self, task: &TaskSpec) -> Option<bool> {
        task.subtasks
            .last()
            .and_then(|s| self.ground_truth(s))
            .map(Outcome::is_success)
    }
}

/// Detector that always answers with the simulated ground truth.
#[derive(Debug, Default, Clone, Copy)]
pub struct OracleDetector;

impl FailureDetector for OracleDetector {
    fn detect(&self, query: &DetectionQuery) -> Result<Verdict, DetectorError> {
        let state = query
            .observation
            .env_state()
            .ok_or_else(|| DetectorError::Unsupported("oracle needs a simulated observation".into()))?;
        let action = query
            .subtask
            .resolve_action()
            .ok_or_else(|| DetectorError::Unsupported(format!("unresolvable subtask {:?}", query.subtask.description)))?;
        let outcome = ground_truth_check(state, &action)
            .map_err(|e| DetectorError::Unsupported(e.to_string()))?;
        let (token, dist) = match outcome {
            Outcome::Success => ("Yes", [("Yes", 1.0), ("No", 0.0)]),
            Outcome::Failure => ("No", [("Yes", 0.0), ("No", 1.0)]),
        };
        let raw: Vec<OptionProb> = dist.iter().map(|(t, p)| OptionProb::new(*t, *p)).collect();
        let dist = renormalize(&raw).expect("oracle distribution");
        let estimate = token_probability_uncertainty(&dist, token).expect("oracle token");
        Ok(Verdict::model(outcome, estimate, token))
    }
}
