//! Strategy x method sweeps over a labeled dataset and their reports.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{
    calibration_auc, calibration_curve, detection_accuracy, generation_rate, selective_auc, selective_curve,
    CurveMode, CurvePoint, EpisodeMetrics, ScoredSample,
};
use super::Dataset;
use crate::backend::{Backend, RequestSettings};
use crate::detector::{assess, DetectorConfig};
use crate::prompting::{PromptTemplates, StrategyKind};
use crate::uncertainty::Method;

#[derive(Debug, Clone, Default)]
pub struct EvalOptions {
    pub mode: CurveMode,
    pub templates: PromptTemplates,
    pub settings: RequestSettings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub strategy: StrategyKind,
    pub method: Method,
    /// Samples attempted.
    pub samples: usize,
    /// Samples that produced a score (the rest failed and are listed in
    /// the report's failures).
    pub scored: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detection_accuracy: Option<f64>,
    /// Omitted for self-explained confidence.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calibration_auc: Option<f64>,
    /// Over successfully generated samples for self-explained confidence.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selective_auc: Option<f64>,
    /// Self-explained confidence only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generation_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleFailure {
    pub sample_id: String,
    pub strategy: StrategyKind,
    pub method: Method,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub samples: usize,
    pub curve_mode: CurveMode,
    pub rows: Vec<ReportRow>,
    #[serde(default)]
    pub failures: Vec<SampleFailure>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub episodes: Option<EpisodeMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveSet {
    pub strategy: StrategyKind,
    pub method: Method,
    /// Empty for self-explained confidence.
    pub calibration: Vec<CurvePoint>,
    pub selective: Vec<CurvePoint>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OfflineEval {
    pub report: MetricsReport,
    pub curves: Vec<CurveSet>,
    /// Scored samples per row, in dataset order.
    pub scored: Vec<Vec<ScoredSample>>,
}

/// Scores every sample under every strategy x method and aggregates. Samples
/// are assessed in parallel and joined in dataset order. A sample whose
/// query fails is excluded from that row and listed in `failures`.
pub fn run_offline_eval(
    dataset: &Dataset,
    strategies: &[StrategyKind],
    methods: &[Method],
    backend: &dyn Backend,
    options: &EvalOptions,
) -> OfflineEval {
    let mut rows = Vec::new();
    let mut curves = Vec::new();
    let mut all_scored = Vec::new();
    let mut failures = Vec::new();
    for &strategy in strategies {
        for &method in methods {
            // the gate is irrelevant offline
            let cfg = DetectorConfig::new(strategy, method, 1.0);
            let results: Vec<_> = dataset
                .samples
                .par_iter()
                .map(|sample| {
                    assess(&sample.query(), &cfg, backend, &options.templates, &options.settings)
                        .map(|a| {
                            ScoredSample::new(
                                &sample.id,
                                sample.label,
                                a.predicted_outcome(),
                                a.estimate,
                                a.generation_failed,
                            )
                        })
                        .map_err(|e| SampleFailure {
                            sample_id: sample.id.clone(),
                            strategy,
                            method,
                            error: e.to_string(),
                        })
                })
                .collect();
            let mut scored = Vec::new();
            for r in results {
                match r {
                    Ok(s) => scored.push(s),
                    Err(f) => failures.push(f),
                }
            }
            let (row, curve) = summarize(strategy, method, dataset.len(), &scored, options.mode);
            rows.push(row);
            curves.push(curve);
            all_scored.push(scored);
        }
    }
    OfflineEval {
        report: MetricsReport {
            samples: dataset.len(),
            curve_mode: options.mode,
            rows,
            failures,
            episodes: None,
        },
        curves,
        scored: all_scored,
    }
}

fn summarize(
    strategy: StrategyKind,
    method: Method,
    samples: usize,
    scored: &[ScoredSample],
    mode: CurveMode,
) -> (ReportRow, CurveSet) {
    let self_explained = method == Method::SelfExplained;
    let curve_input: Vec<ScoredSample> = if self_explained {
        scored.iter().filter(|s| !s.generation_failed).cloned().collect()
    } else {
        scored.to_vec()
    };
    let row = ReportRow {
        strategy,
        method,
        samples,
        scored: scored.len(),
        detection_accuracy: detection_accuracy(scored).ok(),
        calibration_auc: if self_explained {
            None
        } else {
            calibration_auc(&curve_input, mode)
        },
        selective_auc: selective_auc(&curve_input, mode),
        generation_rate: if self_explained {
            generation_rate(scored).ok()
        } else {
            None
        },
    };
    let curve = CurveSet {
        strategy,
        method,
        calibration: if self_explained {
            Vec::new()
        } else {
            calibration_curve(&curve_input, mode)
        },
        selective: selective_curve(&curve_input, mode),
    };
    (row, curve)
}

fn pct(v: Option<f64>) -> String {
    v.map(|x| format!("{:.1}%", x * 100.0)).unwrap_or_else(|| "-".into())
}

fn auc(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.2}")).unwrap_or_else(|| "-".into())
}

fn method_title(m: Method) -> &'static str {
    match m {
        Method::TokenProbability => "Token Probability",
        Method::Entropy => "Entropy",
        Method::SelfExplained => "Self-explained Confidence",
    }
}

fn method_columns(m: Method) -> [&'static str; 3] {
    match m {
        Method::SelfExplained => ["Gen. Rate", "Det. Acc.", "Sel-AUC"],
        _ => ["Det. Acc.", "Cal-AUC", "Sel-AUC"],
    }
}

const CELL: usize = 10;

impl MetricsReport {
    /// Plain-text table: one row per strategy, three columns per method.
    pub fn to_table(&self) -> String {
        let mut strategies: Vec<StrategyKind> = Vec::new();
        let mut methods: Vec<Method> = Vec::new();
        for r in &self.rows {
            if !strategies.contains(&r.strategy) {
                strategies.push(r.strategy);
            }
            if !methods.contains(&r.method) {
                methods.push(r.method);
            }
        }
        let group = 3 * CELL + 2;
        let mut out = String::new();
        let _ = write!(out, "{:<8}", "");
        for m in &methods {
            let _ = write!(out, " | {:<group$}", method_title(*m));
        }
        out.push('\n');
        let _ = write!(out, "{:<8}", "Strategy");
        for m in &methods {
            let [a, b, c] = method_columns(*m);
            let _ = write!(out, " | {a:<CELL$} {b:<CELL$} {c:<CELL$}");
        }
        out.push('\n');
        let _ = writeln!(out, "{}", "-".repeat(8 + methods.len() * (group + 3)));
        for s in &strategies {
            let _ = write!(out, "{:<8}", s.label());
            for m in &methods {
                let row = self.rows.iter().find(|r| r.strategy == *s && r.method == *m);
                let cells = match row {
                    None => ["-".to_string(), "-".to_string(), "-".to_string()],
                    Some(r) if *m == Method::SelfExplained => {
                        [pct(r.generation_rate), pct(r.detection_accuracy), auc(r.selective_auc)]
                    }
                    Some(r) => [pct(r.detection_accuracy), auc(r.calibration_auc), auc(r.selective_auc)],
                };
                let _ = write!(out, " | {:<CELL$} {:<CELL$} {:<CELL$}", cells[0], cells[1], cells[2]);
            }
            out.push('\n');
        }
        out.lines().map(str::trim_end).collect::<Vec<_>>().join("\n") + "\n"
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

/// Writes `x,accuracy,retained` rows.
pub fn write_curve_csv(path: impl AsRef<Path>, points: &[CurvePoint]) -> std::io::Result<()> {
    let mut out = String::from("x,accuracy,retained\n");
    for p in points {
        let _ = writeln!(out, "{},{},{}", p.x, p.accuracy, p.retained);
    }
    std::fs::write(path, out)
}

impl OfflineEval {
    /// Writes `report.json`, `report.txt`, and one CSV per non-empty curve
    /// into `dir`.
    pub fn write_to(&self, dir: impl AsRef<Path>) -> std::io::Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.json"), self.report.to_json())?;
        std::fs::write(dir.join("report.txt"), self.report.to_table())?;
        for c in &self.curves {
            let stem = format!("{}_{}", c.strategy, c.method);
            if !c.calibration.is_empty() {
                write_curve_csv(dir.join(format!("{stem}_calibration.csv")), &c.calibration)?;
            }
            if !c.selective.is_empty() {
                write_curve_csv(dir.join(format!("{stem}_selective.csv")), &c.selective)?;
            }
        }
        Ok(())
    }
}
