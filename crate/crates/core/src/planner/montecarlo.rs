//! Seeded Monte Carlo runs of simulated episodes with an oracle operator.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{ground_truth_check, run_episode, Clock, EpisodeContext, EpisodeError, SimEnv, SimEnvConfig};
use crate::backend::{SimulatedMllm, SimulatedMllmConfig};
use crate::detector::{DetectorConfig, DetectorError, EscalationRequest, FnChannel, MllmDetector};
use crate::domain::{EpisodeTrace, Outcome, TaskSpec};
use crate::eval::{episode_metrics, MetricError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationSpec {
    pub task: TaskSpec,
    pub env: SimEnvConfig,
    pub mllm: SimulatedMllmConfig,
    pub detector: DetectorConfig,
    pub max_retries: usize,
    pub episodes: usize,
    pub seed: u64,
}

/// Per-episode seeds for the environment and the simulated model, drawn
/// from the master seed so that runs are reproducible and different
/// thresholds see the same random streams.
pub fn episode_seeds(seed: u64, episodes: usize) -> Vec<(u64, u64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..episodes).map(|_| (rng.random(), rng.random())).collect()
}

/// Operator that always answers with the simulated ground truth.
pub fn oracle_operator(request: &EscalationRequest) -> Outcome {
    let action = request.query.subtask.resolve_action();
    match (request.query.observation.env_state(), action) {
        (Some(state), Some(action)) => ground_truth_check(state, &action).unwrap_or(Outcome::Failure),
        _ => Outcome::Failure,
    }
}

/// Runs `spec.episodes` independent episodes in parallel; traces come back
/// in episode order.
pub fn simulate(spec: &SimulationSpec) -> Result<Vec<EpisodeTrace>, SimulationError> {
    spec.detector.validate()?;
    let violations = spec.env.violations();
    if !violations.is_empty() {
        return Err(SimulationError::InvalidEnv(violations));
    }
    let traces: Result<Vec<_>, EpisodeError> = episode_seeds(spec.seed, spec.episodes)
        .into_par_iter()
        .map(|(env_seed, model_seed)| {
            let env_cfg = SimEnvConfig {
                rng_seed: env_seed,
                ..spec.env.clone()
            };
            let mut env = SimEnv::new(env_cfg).with_clock(Clock::Logical);
            let model = SimulatedMllm::new(SimulatedMllmConfig {
                seed: model_seed,
                ..spec.mllm.clone()
            });
            let detector = MllmDetector::new(spec.detector.clone(), model, FnChannel(oracle_operator))
                .expect("validated above");
            run_episode(&spec.task, &mut env, &detector, spec.max_retries, EpisodeContext::default())
        })
        .collect();
    Ok(traces?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub delta: f64,
    pub success_rate: f64,
    pub reported_success_rate: f64,
    pub human_involve_rate: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detection_accuracy: Option<f64>,
}

#[derive(Debug, thiserror::Error)]
pub enum SimulationError {
    #[error(transparent)]
    InvalidDetector(#[from] DetectorError),
    #[error("invalid simulation config: {}", .0.join("; "))]
    InvalidEnv(Vec<String>),
    #[error(transparent)]
    Episode(#[from] EpisodeError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

/// Repeats [`simulate`] for each threshold with identical seeds.
pub fn sweep(spec: &SimulationSpec, deltas: &[f64]) -> Result<Vec<SweepRow>, SimulationError> {
    deltas
        .iter()
        .map(|&delta| {
            let mut s = spec.clone();
            s.detector.threshold = delta;
            let m = episode_metrics(&simulate(&s)?)?;
            Ok(SweepRow {
                delta,
                success_rate: m.success_rate,
                reported_success_rate: m.reported_success_rate,
                human_involve_rate: m.human_involve_rate,
                detection_accuracy: m.detection_accuracy,
            })
        })
        .collect()
}

/// Plain-text tradeoff table, one row per threshold.
pub fn sweep_table(rows: &[SweepRow]) -> String {
    let mut out = String::from("delta  success  reported  human_involve  detection_acc\n");
    for r in rows {
        out.push_str(&format!(
            "{:<6.2} {:<8.3} {:<9.3} {:<14.3} {}\n",
            r.delta,
            r.success_rate,
            r.reported_success_rate,
            r.human_involve_rate,
            r.detection_accuracy
                .map(|a| format!("{a:.3}"))
                .unwrap_or_else(|| "-".into())
        ));
    }
    out
}
