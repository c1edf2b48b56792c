//! Stochastic stand-in for an MLLM looking at a simulated environment.
//!
//! For each answer-bearing call the backend computes the true outcome from
//! the simulated state, draws an uncertainty `u ~ U[0,1)`, answers correctly
//! with the accuracy of `u`'s bucket, and shapes the reported option
//! distribution so that the target uncertainty method recovers `u`.

use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Alternative, Backend, BackendError, BackendReply, BackendRequest, TokenLogprob};
use crate::domain::Outcome;
use crate::planner::{ground_truth_check, EnvState};
use crate::prompting::StrategyKind;
use crate::uncertainty::{normalized_entropy, Method};

/// Accuracy applied when the drawn uncertainty is below `below`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccuracyBucket {
    pub below: f64,
    pub accuracy: f64,
}

fn default_buckets() -> Vec<AccuracyBucket> {
    vec![
        AccuracyBucket {
            below: 0.6,
            accuracy: 0.9,
        },
        AccuracyBucket {
            below: f64::INFINITY,
            accuracy: 0.55,
        },
    ]
}

fn default_target() -> Method {
    Method::Entropy
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulatedMllmConfig {
    #[serde(default = "default_buckets")]
    pub buckets: Vec<AccuracyBucket>,
    /// Method whose score should equal the drawn uncertainty. With
    /// `token_probability` the score is `u * (1 - 1/m)` for `m` options,
    /// since the chosen option must stay the most probable one.
    #[serde(default = "default_target")]
    pub target: Method,
    /// Probability that a self-explained reply contains the confidence phrase.
    #[serde(default = "one")]
    pub generation_rate: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for SimulatedMllmConfig {
    fn default() -> Self {
        Self {
            buckets: default_buckets(),
            target: default_target(),
            generation_rate: 1.0,
            seed: 0,
        }
    }
}

impl SimulatedMllmConfig {
    pub fn accuracy_for(&self, uncertainty: f64) -> f64 {
        self.buckets
            .iter()
            .find(|b| uncertainty < b.below)
            .or(self.buckets.last())
            .map(|b| b.accuracy)
            .unwrap_or(1.0)
    }
}

pub struct SimulatedMllm {
    config: SimulatedMllmConfig,
    rng: Mutex<ChaCha8Rng>,
}

impl SimulatedMllm {
    pub fn new(config: SimulatedMllmConfig) -> Self {
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Self {
            config,
            rng: Mutex::new(rng),
        }
    }

    pub fn config(&self) -> &SimulatedMllmConfig {
        &self.config
    }
}

/// Probability of the chosen option, with the remaining mass spread evenly
/// over the other `m - 1` options, such that the normalized entropy is `u`.
pub(crate) fn chosen_mass_for_entropy(u: f64, m: usize) -> f64 {
    let entropy_at = |p: f64| {
        let rest = (1.0 - p) / (m - 1) as f64;
        let mut probs = vec![rest; m];
        probs[0] = p;
        normalized_entropy(&probs)
    };
    // entropy decreases from 1 at p = 1/m to 0 at p = 1
    let (mut lo, mut hi) = (1.0 / m as f64, 1.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if entropy_at(mid) > u {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn describe_state(state: &EnvState) -> String {
    let mut parts = Vec::new();
    match &state.gripper.holding {
        Some(obj) => parts.push(format!("The gripper is holding the {obj}.")),
        None => parts.push("The gripper is empty.".to_string()),
    }
    for (id, obj) in &state.objects {
        if !obj.held {
            parts.push(format!("The {id} is at {}.", obj.position));
        }
    }
    for (id, fixture) in &state.fixtures {
        parts.push(format!("The {id} is {fixture}."));
    }
    parts.join(" ")
}

impl Backend for SimulatedMllm {
    fn complete(&self, req: &BackendRequest) -> Result<BackendReply, BackendError> {
        let ctx = req.context.as_ref().ok_or_else(|| {
            BackendError::InvalidRequest("simulated backend needs query context".into())
        })?;
        let state = ctx.observation.env_state().ok_or_else(|| {
            BackendError::InvalidRequest("simulated backend needs a simulated observation".into())
        })?;
        if req.is_free_text() {
            return Ok(BackendReply {
                text: describe_state(state),
                token_logprobs: None,
                model_name: "simulated".into(),
                latency_ms: 0,
            });
        }
        let action = ctx.subtask.resolve_action().ok_or_else(|| {
            BackendError::InvalidRequest(format!("unresolvable subtask {:?}", ctx.subtask.description))
        })?;
        let truth = ground_truth_check(state, &action)
            .map_err(|e| BackendError::InvalidRequest(e.to_string()))?;

        let (u, correct_draw, generation_draw) = {
            let mut rng = self.rng.lock().unwrap_or_else(|e| e.into_inner());
            (
                rng.random::<f64>(),
                rng.random::<f64>(),
                rng.random::<f64>(),
            )
        };
        let correct = correct_draw < self.config.accuracy_for(u);
        let predicted = if correct {
            truth
        } else {
            Outcome::from_bool(!truth.is_success())
        };

        let options = &req.answer_options;
        let chosen_index = match ctx.strategy {
            StrategyKind::Ssc | StrategyKind::Sra => {
                let want = if predicted.is_success() { "yes" } else { "no" };
                options
                    .iter()
                    .position(|o| o.eq_ignore_ascii_case(want))
                    .ok_or_else(|| BackendError::InvalidRequest("yes/no options expected".into()))?
            }
            StrategyKind::Nap => {
                let idx = if predicted.is_success() {
                    ctx.executed_index + 1
                } else {
                    ctx.executed_index
                };
                if idx >= options.len() {
                    return Err(BackendError::InvalidRequest("NAP option out of range".into()));
                }
                idx
            }
        };
        let answer = options[chosen_index].clone();
        let m = options.len().max(2);
        let chosen_p = match self.config.target {
            Method::TokenProbability => 1.0 - u * (1.0 - 1.0 / m as f64),
            Method::Entropy | Method::SelfExplained => chosen_mass_for_entropy(u, m),
        };
        let rest = (1.0 - chosen_p) / (m - 1) as f64;

        let text = if ctx.method == Method::SelfExplained {
            if generation_draw < self.config.generation_rate {
                format!(
                    "I am {:.1}% certain that the answer is {answer}",
                    (1.0 - u) * 100.0
                )
            } else {
                format!("{answer}.")
            }
        } else {
            answer.clone()
        };
        let token_logprobs = req.want_logprobs.then(|| {
            let alternatives = options
                .iter()
                .enumerate()
                .map(|(i, o)| Alternative {
                    token: o.clone(),
                    logprob: if i == chosen_index { chosen_p } else { rest }.ln(),
                })
                .filter(|a| a.logprob.is_finite())
                .collect();
            vec![TokenLogprob {
                token: answer.clone(),
                logprob: chosen_p.ln(),
                alternatives,
            }]
        });
        Ok(BackendReply {
            text,
            token_logprobs,
            model_name: "simulated".into(),
            latency_ms: 0,
        })
    }
}
