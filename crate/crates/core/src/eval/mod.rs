//! Offline evaluation: labeled datasets, metric sweeps over strategy x
//! method, and Table-style reports.

mod metrics;
mod report;

use std::collections::{BTreeMap, HashSet};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use metrics::{
    calibration_auc, calibration_curve, detection_accuracy, episode_metrics, generation_rate, selective_auc,
    selective_curve, trapezoid_auc, CurveMode, CurvePoint, EpisodeMetrics, MetricError, ScoredSample,
    DEFAULT_GRID_POINTS,
};
pub use report::{
    run_offline_eval, write_curve_csv, CurveSet, EvalOptions, MetricsReport, OfflineEval, ReportRow, SampleFailure,
};

use crate::detector::DetectionQuery;
use crate::domain::{Observation, Outcome, Subtask, TaskSpec};

/// One annotated detection case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub id: String,
    pub task_id: String,
    pub instruction: String,
    /// The subtask that was just executed.
    pub description: String,
    pub expected_state: String,
    /// Full plan, needed by next-action prompting. When absent the plan is
    /// the single described subtask.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan: Option<Vec<String>>,
    #[serde(default)]
    pub subtask_index: usize,
    pub observation: Observation,
    pub label: Outcome,
}

impl LabeledSample {
    /// Task and subtask the sample stands for.
    pub fn task(&self) -> (TaskSpec, Subtask) {
        let subtask = Subtask::new(self.subtask_index, &self.description, &self.expected_state);
        let subtasks = match &self.plan {
            Some(plan) => plan
                .iter()
                .enumerate()
                .map(|(i, step)| {
                    if i == self.subtask_index {
                        subtask.clone()
                    } else {
                        Subtask::new(i, step, step)
                    }
                })
                .collect(),
            None => vec![Subtask::new(0, &self.description, &self.expected_state)],
        };
        let subtask = subtasks
            .get(if self.plan.is_some() { self.subtask_index } else { 0 })
            .cloned()
            .unwrap_or(subtask);
        (
            TaskSpec {
                id: self.task_id.clone(),
                instruction: self.instruction.clone(),
                subtasks,
            },
            subtask,
        )
    }

    pub fn query(&self) -> DetectionQuery {
        let (task, subtask) = self.task();
        let mut q = DetectionQuery::new(Arc::new(task), subtask, self.observation.clone(), 0);
        q.sample_id = Some(self.id.clone());
        q
    }

    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (name, value) in [
            ("id", &self.id),
            ("task_id", &self.task_id),
            ("instruction", &self.instruction),
            ("description", &self.description),
            ("expected_state", &self.expected_state),
        ] {
            if value.trim().is_empty() {
                out.push(format!("{name} empty"));
            }
        }
        if let Some(plan) = &self.plan {
            if self.subtask_index >= plan.len() {
                out.push(format!(
                    "subtask_index {} outside plan of {}",
                    self.subtask_index,
                    plan.len()
                ));
            } else if plan[self.subtask_index] != self.description {
                out.push("plan entry at subtask_index differs from description".into());
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelCounts {
    pub success: usize,
    pub failure: usize,
}

/// Expected per-task label counts.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    #[serde(default)]
    pub name: String,
    pub tasks: BTreeMap<String, LabelCounts>,
}

impl DatasetManifest {
    pub fn total(&self) -> LabelCounts {
        self.tasks.values().fold(LabelCounts::default(), |acc, c| LabelCounts {
            success: acc.success + c.success,
            failure: acc.failure + c.failure,
        })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },
    #[error("duplicate sample id {0}")]
    DuplicateId(String),
    #[error("invalid samples: {}", .0.join("; "))]
    InvalidSample(Vec<String>),
    #[error("manifest mismatch: {}", .0.join("; "))]
    ManifestMismatch(Vec<String>),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub samples: Vec<LabeledSample>,
}

fn read(path: &Path) -> Result<String, DatasetError> {
    std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })
}

impl Dataset {
    pub fn new(samples: Vec<LabeledSample>) -> Result<Self, DatasetError> {
        let mut seen = HashSet::new();
        let mut invalid = Vec::new();
        for s in &samples {
            if !seen.insert(s.id.as_str()) {
                return Err(DatasetError::DuplicateId(s.id.clone()));
            }
            invalid.extend(s.violations().into_iter().map(|v| format!("{}: {v}", s.id)));
        }
        if !invalid.is_empty() {
            return Err(DatasetError::InvalidSample(invalid));
        }
        Ok(Self { samples })
    }

    /// Parses JSON-lines; blank lines are skipped.
    pub fn from_jsonl(text: &str, origin: &str) -> Result<Self, DatasetError> {
        let mut samples = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let sample = serde_json::from_str(line).map_err(|e| DatasetError::Parse {
                path: origin.to_string(),
                line: i + 1,
                message: e.to_string(),
            })?;
            samples.push(sample);
        }
        Self::new(samples)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DatasetError> {
        let path = path.as_ref();
        Self::from_jsonl(&read(path)?, &path.display().to_string())
    }

    /// Loads the dataset and checks it against a manifest.
    pub fn load_with_manifest(path: impl AsRef<Path>, manifest: impl AsRef<Path>) -> Result<Self, DatasetError> {
        let dataset = Self::load(path)?;
        let manifest_path = manifest.as_ref();
        let manifest: DatasetManifest =
            serde_json::from_str(&read(manifest_path)?).map_err(|e| DatasetError::Parse {
                path: manifest_path.display().to_string(),
                line: e.line(),
                message: e.to_string(),
            })?;
        dataset.verify(&manifest)?;
        Ok(dataset)
    }

    pub fn counts(&self) -> BTreeMap<String, LabelCounts> {
        let mut out: BTreeMap<String, LabelCounts> = BTreeMap::new();
        for s in &self.samples {
            let c = out.entry(s.task_id.clone()).or_default();
            match s.label {
                Outcome::Success => c.success += 1,
                Outcome::Failure => c.failure += 1,
            }
        }
        out
    }

    pub fn verify(&self, manifest: &DatasetManifest) -> Result<(), DatasetError> {
        let actual = self.counts();
        let mut problems = Vec::new();
        for (task, want) in &manifest.tasks {
            let got = actual.get(task).copied().unwrap_or_default();
            if got != *want {
                problems.push(format!(
                    "{task}: expected {}/{} success/failure, found {}/{}",
                    want.success, want.failure, got.success, got.failure
                ));
            }
        }
        for task in actual.keys().filter(|t| !manifest.tasks.contains_key(*t)) {
            problems.push(format!("{task}: not in manifest"));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(DatasetError::ManifestMismatch(problems))
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}
