//! Detection metrics: accuracy, calibration and selective curves, generation
//! rate, and episode-level rates.

use serde::{Deserialize, Serialize};

use crate::domain::{EpisodeTrace, Outcome, VerdictSource};
use crate::uncertainty::{Method, UncertaintyEstimate};

pub const DEFAULT_GRID_POINTS: usize = 101;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MetricError {
    #[error("no samples left after excluding human-assisted and generation-failed ones")]
    EmptyAfterExclusion,
    #[error("generation rate is defined for self_explained only, got {0}")]
    WrongMethod(Method),
    #[error("no samples")]
    Empty,
}

/// One detector output joined with its label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub sample_id: String,
    pub label: Outcome,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicted: Option<Outcome>,
    /// `predicted == Some(label)`; a reply without an answer is incorrect.
    pub correct: bool,
    pub estimate: UncertaintyEstimate,
    /// Self-explained reply without a confidence phrase.
    #[serde(default)]
    pub generation_failed: bool,
    /// Answered by a human rather than the model.
    #[serde(default)]
    pub human_assisted: bool,
}

impl ScoredSample {
    pub fn new(
        sample_id: impl Into<String>,
        label: Outcome,
        predicted: Option<Outcome>,
        estimate: UncertaintyEstimate,
        generation_failed: bool,
    ) -> Self {
        Self {
            sample_id: sample_id.into(),
            label,
            predicted,
            correct: predicted == Some(label),
            estimate,
            generation_failed,
            human_assisted: false,
        }
    }

    pub fn uncertainty(&self) -> f64 {
        self.estimate.value()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    /// Threshold `t` or abstention rate `alpha`.
    pub x: f64,
    pub accuracy: f64,
    pub retained: usize,
}

/// How curves are sampled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum CurveMode {
    /// Uniform grid over [0,1] with this many points (at least 2);
    /// AUC by the trapezoid rule.
    Grid { points: usize },
    /// Points at every change of the retained set; AUC is the exact
    /// integral of the step function.
    Breakpoints,
}

impl Default for CurveMode {
    fn default() -> Self {
        CurveMode::Grid {
            points: DEFAULT_GRID_POINTS,
        }
    }
}

/// Correct model predictions over model predictions, excluding
/// human-assisted and generation-failed samples.
pub fn detection_accuracy(scored: &[ScoredSample]) -> Result<f64, MetricError> {
    let kept: Vec<&ScoredSample> = scored
        .iter()
        .filter(|s| !s.human_assisted && !s.generation_failed)
        .collect();
    if kept.is_empty() {
        return Err(MetricError::EmptyAfterExclusion);
    }
    Ok(kept.iter().filter(|s| s.correct).count() as f64 / kept.len() as f64)
}

fn accuracy(correct: usize, total: usize) -> f64 {
    correct as f64 / total as f64
}

fn grid_x(j: usize, points: usize) -> f64 {
    j as f64 / (points - 1) as f64
}

/// Trapezoid rule over the curve's points.
pub fn trapezoid_auc(curve: &[CurvePoint]) -> f64 {
    curve
        .windows(2)
        .map(|w| (w[1].x - w[0].x) * (w[0].accuracy + w[1].accuracy) / 2.0)
        .sum()
}

/// Area under a right-continuous step function whose value on
/// `[x_i, x_{i+1})` is `accuracy_i`.
fn step_auc(curve: &[CurvePoint]) -> f64 {
    curve
        .windows(2)
        .map(|w| (w[1].x - w[0].x) * w[0].accuracy)
        .sum()
}

/// Accuracy as a function of threshold `t`: samples with uncertainty above
/// `1 - t` are excluded. Empty retained sets carry the previous accuracy.
pub fn calibration_curve(scored: &[ScoredSample], mode: CurveMode) -> Vec<CurvePoint> {
    if scored.is_empty() {
        return Vec::new();
    }
    match mode {
        CurveMode::Grid { points } => {
            let points = points.max(2);
            let mut out = Vec::with_capacity(points);
            let mut last = 0.0;
            for j in 0..points {
                let t = grid_x(j, points);
                let cut = 1.0 - t;
                let (kept, correct) = scored
                    .iter()
                    .filter(|s| s.uncertainty() <= cut)
                    .fold((0, 0), |(k, c), s| (k + 1, c + s.correct as usize));
                if kept > 0 {
                    last = accuracy(correct, kept);
                }
                out.push(CurvePoint {
                    x: t,
                    accuracy: last,
                    retained: kept,
                });
            }
            out
        }
        CurveMode::Breakpoints => {
            // Sample i is retained for t <= 1 - u_i; sort by u ascending so
            // the retained set at t is a prefix.
            let mut sorted: Vec<&ScoredSample> = scored.iter().collect();
            sorted.sort_by(|a, b| a.uncertainty().total_cmp(&b.uncertainty()));
            let total_correct = sorted.iter().filter(|s| s.correct).count();
            let mut out = vec![CurvePoint {
                x: 0.0,
                accuracy: accuracy(total_correct, sorted.len()),
                retained: sorted.len(),
            }];
            let mut kept = sorted.len();
            let mut correct = total_correct;
            let mut last = out[0].accuracy;
            // drop samples from the most uncertain end; each distinct u
            // leaves the set just after t = 1 - u
            while kept > 0 {
                let u = sorted[kept - 1].uncertainty();
                while kept > 0 && sorted[kept - 1].uncertainty() == u {
                    correct -= sorted[kept - 1].correct as usize;
                    kept -= 1;
                }
                let x = 1.0 - u;
                if x >= 1.0 {
                    break;
                }
                if kept > 0 {
                    last = accuracy(correct, kept);
                }
                out.push(CurvePoint {
                    x,
                    accuracy: last,
                    retained: kept,
                });
            }
            let end = out.last().copied().expect("non-empty");
            if end.x < 1.0 {
                out.push(CurvePoint { x: 1.0, ..end });
            }
            out
        }
    }
}

/// Samples sorted for abstention: most uncertain first, ties by id.
fn abstention_order(scored: &[ScoredSample]) -> Vec<&ScoredSample> {
    let mut sorted: Vec<&ScoredSample> = scored.iter().collect();
    sorted.sort_by(|a, b| {
        b.uncertainty()
            .total_cmp(&a.uncertainty())
            .then_with(|| a.sample_id.cmp(&b.sample_id))
    });
    sorted
}

/// Accuracy after abstaining from the `floor(alpha * n)` most uncertain
/// samples. The all-abstained end carries the previous accuracy.
pub fn selective_curve(scored: &[ScoredSample], mode: CurveMode) -> Vec<CurvePoint> {
    let n = scored.len();
    if n == 0 {
        return Vec::new();
    }
    let sorted = abstention_order(scored);
    // suffix_correct[m] = correct among sorted[m..]
    let mut suffix_correct = vec![0usize; n + 1];
    for m in (0..n).rev() {
        suffix_correct[m] = suffix_correct[m + 1] + sorted[m].correct as usize;
    }
    let point = |x: f64, abstain: usize, last: &mut f64| {
        let kept = n - abstain;
        if kept > 0 {
            *last = accuracy(suffix_correct[abstain], kept);
        }
        CurvePoint {
            x,
            accuracy: *last,
            retained: kept,
        }
    };
    let mut last = 0.0;
    match mode {
        CurveMode::Grid { points } => {
            let points = points.max(2);
            (0..points)
                .map(|j| point(grid_x(j, points), j * n / (points - 1), &mut last))
                .collect()
        }
        CurveMode::Breakpoints => (0..=n)
            .map(|m| point(m as f64 / n as f64, m, &mut last))
            .collect(),
    }
}

fn auc(curve: &[CurvePoint], mode: CurveMode) -> Option<f64> {
    if curve.is_empty() {
        return None;
    }
    Some(match mode {
        CurveMode::Grid { .. } => trapezoid_auc(curve),
        CurveMode::Breakpoints => step_auc(curve),
    })
}

/// `None` for an empty sample set.
pub fn calibration_auc(scored: &[ScoredSample], mode: CurveMode) -> Option<f64> {
    auc(&calibration_curve(scored, mode), mode)
}

/// `None` for an empty sample set.
pub fn selective_auc(scored: &[ScoredSample], mode: CurveMode) -> Option<f64> {
    auc(&selective_curve(scored, mode), mode)
}

/// Parsed confidence phrases over attempts; self-explained samples only.
pub fn generation_rate(scored: &[ScoredSample]) -> Result<f64, MetricError> {
    if let Some(s) = scored.iter().find(|s| s.estimate.method() != Method::SelfExplained) {
        return Err(MetricError::WrongMethod(s.estimate.method()));
    }
    if scored.is_empty() {
        return Err(MetricError::Empty);
    }
    Ok(scored.iter().filter(|s| !s.generation_failed).count() as f64 / scored.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub episodes: usize,
    /// Episodes that finished the plan and, when ground truth is known,
    /// actually reached the goal.
    pub success_rate: f64,
    /// Episodes whose planner reported success, regardless of ground truth.
    pub reported_success_rate: f64,
    pub human_involve_rate: f64,
    /// Model verdicts agreeing with step ground truth; `None` without
    /// ground truth or model verdicts.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detection_accuracy: Option<f64>,
}

pub fn episode_metrics(traces: &[EpisodeTrace]) -> Result<EpisodeMetrics, MetricError> {
    if traces.is_empty() {
        return Err(MetricError::Empty);
    }
    let n = traces.len() as f64;
    let human: usize = traces.iter().map(|t| t.human_queries).sum();
    let model: usize = traces.iter().map(|t| t.model_queries).sum();
    let (mut judged, mut right) = (0usize, 0usize);
    for step in traces.iter().flat_map(|t| &t.steps) {
        if step.verdict.source() != VerdictSource::Model {
            continue;
        }
        if let Some(truth) = step.execution_result.ground_truth {
            judged += 1;
            right += (truth == step.verdict.outcome()) as usize;
        }
    }
    Ok(EpisodeMetrics {
        episodes: traces.len(),
        success_rate: traces.iter().filter(|t| t.succeeded()).count() as f64 / n,
        reported_success_rate: traces
            .iter()
            .filter(|t| t.final_status == crate::domain::FinalStatus::Success)
            .count() as f64
            / n,
        human_involve_rate: if human + model == 0 {
            0.0
        } else {
            human as f64 / (human + model) as f64
        },
        detection_accuracy: (judged > 0).then(|| right as f64 / judged as f64),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::uncertainty::{renormalize, token_probability_uncertainty, OptionProb};

    fn est(u: f64) -> UncertaintyEstimate {
        let dist = renormalize(&[OptionProb::new("Yes", 1.0 - u), OptionProb::new("No", u)]).unwrap();
        // chosen option is "Yes" so the value is exactly u
        token_probability_uncertainty(&dist, "Yes").unwrap()
    }

    fn sample(id: &str, u: f64, correct: bool) -> ScoredSample {
        let predicted = if correct { Outcome::Success } else { Outcome::Failure };
        ScoredSample::new(id, Outcome::Success, Some(predicted), est(u), false)
    }

    fn grid() -> CurveMode {
        CurveMode::default()
    }

    #[test]
    fn accuracy_excludes_human_assisted() {
        let mut s = vec![
            sample("a", 0.1, true),
            sample("b", 0.1, true),
            sample("c", 0.1, true),
            sample("d", 0.1, false),
            sample("e", 0.1, false),
        ];
        s[4].human_assisted = true;
        assert_eq!(detection_accuracy(&s), Ok(0.75));
        assert_eq!(detection_accuracy(&s[4..]), Err(MetricError::EmptyAfterExclusion));
    }

    #[test]
    fn all_correct_calibration_is_one() {
        let s = vec![sample("a", 0.3, true), sample("b", 0.95, true)];
        assert!(calibration_curve(&s, grid()).iter().all(|p| p.accuracy == 1.0));
        assert!((calibration_auc(&s, grid()).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn calibration_two_samples() {
        let s = vec![sample("a", 0.1, true), sample("b", 0.9, false)];
        let c = calibration_curve(&s, grid());
        assert_eq!(c[0].accuracy, 0.5);
        assert_eq!(c[0].retained, 2);
        // 0.9 <= 1 - t only for t <= 0.1 (up to rounding of the grid)
        assert!(c.iter().filter(|p| p.x > 0.1 + 1e-9).all(|p| p.accuracy == 1.0));
        // t = 1 retains nothing (0.1 > 0): carry forward
        assert_eq!(c[100].retained, 0);
        assert_eq!(c[100].accuracy, 1.0);
    }

    #[test]
    fn selective_four_samples() {
        let s = vec![
            sample("a", 0.9, false),
            sample("b", 0.7, true),
            sample("c", 0.3, true),
            sample("d", 0.1, true),
        ];
        let c = selective_curve(&s, CurveMode::Grid { points: 5 });
        let acc: Vec<f64> = c.iter().map(|p| p.accuracy).collect();
        assert_eq!(acc, vec![0.75, 1.0, 1.0, 1.0, 1.0]);
        assert_eq!(c[4].retained, 0);
        let b = selective_curve(&s, CurveMode::Breakpoints);
        assert_eq!(b.len(), 5);
        // exact step integral = (0.75 + 1 + 1 + 1) / 4
        assert!((selective_auc(&s, CurveMode::Breakpoints).unwrap() - 0.9375).abs() < 1e-12);
    }

    #[test]
    fn all_incorrect_selective_is_zero() {
        let s = vec![sample("a", 0.2, false), sample("b", 0.5, false)];
        assert!(selective_curve(&s, grid()).iter().all(|p| p.accuracy == 0.0));
        assert_eq!(selective_auc(&s, grid()), Some(0.0));
    }

    #[test]
    fn selective_tie_break_by_id() {
        let s = vec![sample("b", 0.5, true), sample("a", 0.5, false)];
        let c = selective_curve(&s, CurveMode::Grid { points: 3 });
        // "a" abstained first
        assert_eq!(c[1].accuracy, 1.0);
    }

    #[test]
    fn breakpoint_calibration() {
        let s = vec![sample("a", 0.1, true), sample("b", 0.9, false)];
        let c = calibration_curve(&s, CurveMode::Breakpoints);
        let xs: Vec<f64> = c.iter().map(|p| p.x).collect();
        assert_eq!(xs.len(), 4);
        assert_eq!(c[0].accuracy, 0.5);
        assert!((c[1].x - 0.1).abs() < 1e-12 && c[1].accuracy == 1.0);
        // exact area: 0.5 on [0, 0.1), 1.0 after
        assert!((calibration_auc(&s, CurveMode::Breakpoints).unwrap() - 0.95).abs() < 1e-12);
    }

    #[test]
    fn empty_inputs() {
        assert!(calibration_curve(&[], grid()).is_empty());
        assert_eq!(selective_auc(&[], grid()), None);
        assert_eq!(generation_rate(&[]), Err(MetricError::Empty));
    }

    #[test]
    fn generation_rate_rules() {
        assert_eq!(
            generation_rate(&[sample("a", 0.1, true)]),
            Err(MetricError::WrongMethod(Method::TokenProbability))
        );
        let failed = |id: &str| {
            ScoredSample::new(
                id,
                Outcome::Success,
                None,
                UncertaintyEstimate::unavailable(Method::SelfExplained, "none"),
                true,
            )
        };
        assert_eq!(generation_rate(&[failed("a"), failed("b")]), Ok(0.0));
    }
}
