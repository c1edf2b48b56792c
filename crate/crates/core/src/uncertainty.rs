//! Uncertainty scores in `[0, 1]` (higher means less trustworthy) computed
//! from a backend reply by token probability, normalized entropy, or the
//! model's self-stated confidence.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

const SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum UncertaintyError {
    #[error("option tokens carry zero probability mass")]
    ZeroMass,
    #[error("token {0:?} is not an answer option")]
    UnknownToken(String),
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    TokenProbability,
    Entropy,
    SelfExplained,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::TokenProbability, Method::Entropy, Method::SelfExplained];

    pub fn uses_logprobs(self) -> bool {
        !matches!(self, Method::SelfExplained)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Method::TokenProbability => "token_probability",
            Method::Entropy => "entropy",
            Method::SelfExplained => "self_explained",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "token_probability" | "token_prob" | "token" => Ok(Method::TokenProbability),
            "entropy" => Ok(Method::Entropy),
            "self_explained" | "self" | "confidence" => Ok(Method::SelfExplained),
            other => Err(format!("unknown uncertainty method {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptionProb {
    pub token: String,
    pub probability: f64,
}

impl OptionProb {
    pub fn new(token: impl Into<String>, probability: f64) -> Self {
        Self {
            token: token.into(),
            probability,
        }
    }
}

/// Probability mass over the answer-option tokens only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DistributionRepr", into = "DistributionRepr")]
pub struct TokenDistribution {
    entries: Vec<OptionProb>,
    renormalized: bool,
}

#[derive(Serialize, Deserialize)]
struct DistributionRepr {
    entries: Vec<OptionProb>,
    renormalized: bool,
}

impl TryFrom<DistributionRepr> for TokenDistribution {
    type Error = UncertaintyError;

    fn try_from(r: DistributionRepr) -> Result<Self, Self::Error> {
        check_entries(&r.entries)?;
        if r.renormalized {
            let total: f64 = r.entries.iter().map(|e| e.probability).sum();
            if (total - 1.0).abs() > SUM_TOLERANCE {
                return Err(UncertaintyError::InvalidDistribution(format!(
                    "renormalized entries sum to {total}"
                )));
            }
        }
        Ok(TokenDistribution {
            entries: r.entries,
            renormalized: r.renormalized,
        })
    }
}

impl From<TokenDistribution> for DistributionRepr {
    fn from(d: TokenDistribution) -> Self {
        DistributionRepr {
            entries: d.entries,
            renormalized: d.renormalized,
        }
    }
}

fn check_entries(entries: &[OptionProb]) -> Result<(), UncertaintyError> {
    if entries.len() < 2 {
        return Err(UncertaintyError::InvalidDistribution(
            "need at least two option tokens".into(),
        ));
    }
    let mut seen = HashSet::new();
    for e in entries {
        if !(0.0..=1.0).contains(&e.probability) {
            return Err(UncertaintyError::InvalidDistribution(format!(
                "probability {} for {:?} outside [0,1]",
                e.probability, e.token
            )));
        }
        if !seen.insert(e.token.as_str()) {
            return Err(UncertaintyError::InvalidDistribution(format!(
                "duplicate token {:?}",
                e.token
            )));
        }
    }
    Ok(())
}

impl TokenDistribution {
    pub fn entries(&self) -> &[OptionProb] {
        &self.entries
    }

    pub fn is_renormalized(&self) -> bool {
        self.renormalized
    }

    pub fn probability(&self, token: &str) -> Option<f64> {
        self.entries
            .iter()
            .find(|e| e.token == token)
            .map(|e| e.probability)
    }

    /// Highest-probability option; ties go to the earlier option.
    pub fn top_option(&self) -> &str {
        let mut best = &self.entries[0];
        for e in &self.entries[1..] {
            if e.probability > best.probability {
                best = e;
            }
        }
        &best.token
    }
}

/// Divides every option probability by the total option mass.
pub fn renormalize(raw: &[OptionProb]) -> Result<TokenDistribution, UncertaintyError> {
    check_entries(raw)?;
    let total: f64 = raw.iter().map(|e| e.probability).sum();
    if total <= 0.0 {
        return Err(UncertaintyError::ZeroMass);
    }
    Ok(TokenDistribution {
        entries: raw
            .iter()
            .map(|e| OptionProb::new(e.token.clone(), e.probability / total))
            .collect(),
        renormalized: true,
    })
}

/// The model's stated confidence, parsed from "I am X% certain that the
/// answer is Y".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsedConfidence {
    pub stated_percent: f64,
    pub answer: String,
    pub matched_text: String,
}

/// Marker for a reply that contains no usable confidence phrase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationFailure;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Evidence {
    Tokens { distribution: TokenDistribution },
    Confidence { parsed: ParsedConfidence },
    /// No usable evidence (unparseable reply, missing answer position,
    /// failed confidence generation). Always paired with value 1.0.
    Unavailable { reason: String },
}

/// A scalar uncertainty with the method and evidence that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "EstimateRepr", into = "EstimateRepr")]
pub struct UncertaintyEstimate {
    value: f64,
    method: Method,
    evidence: Evidence,
}

#[derive(Serialize, Deserialize)]
struct EstimateRepr {
    value: f64,
    method: Method,
    evidence: Evidence,
}

impl TryFrom<EstimateRepr> for UncertaintyEstimate {
    type Error = String;

    fn try_from(r: EstimateRepr) -> Result<Self, Self::Error> {
        if !(0.0..=1.0).contains(&r.value) {
            return Err(format!("uncertainty {} outside [0,1]", r.value));
        }
        let consistent = match (&r.evidence, r.method) {
            (Evidence::Tokens { .. }, Method::TokenProbability | Method::Entropy) => true,
            (Evidence::Confidence { .. }, Method::SelfExplained) => true,
            (Evidence::Unavailable { .. }, _) => r.value == 1.0,
            _ => false,
        };
        if !consistent {
            return Err(format!("evidence does not match method {}", r.method));
        }
        Ok(UncertaintyEstimate {
            value: r.value,
            method: r.method,
            evidence: r.evidence,
        })
    }
}

impl From<UncertaintyEstimate> for EstimateRepr {
    fn from(e: UncertaintyEstimate) -> Self {
        EstimateRepr {
            value: e.value,
            method: e.method,
            evidence: e.evidence,
        }
    }
}

impl UncertaintyEstimate {
    pub fn value(&self) -> f64 {
        self.value
    }

    pub fn method(&self) -> Method {
        self.method
    }

    pub fn evidence(&self) -> &Evidence {
        &self.evidence
    }

    /// Maximal uncertainty for a reply that yielded no evidence; forces
    /// escalation at any threshold.
    pub fn unavailable(method: Method, reason: impl Into<String>) -> Self {
        Self {
            value: 1.0,
            method,
            evidence: Evidence::Unavailable {
                reason: reason.into(),
            },
        }
    }

    pub fn is_available(&self) -> bool {
        !matches!(self.evidence, Evidence::Unavailable { .. })
    }
}

/// `1 - P(chosen)` over a renormalized distribution.
pub fn token_probability_uncertainty(
    dist: &TokenDistribution,
    chosen: &str,
) -> Result<UncertaintyEstimate, UncertaintyError> {
    let p = dist
        .probability(chosen)
        .ok_or_else(|| UncertaintyError::UnknownToken(chosen.to_string()))?;
    Ok(UncertaintyEstimate {
        value: (1.0 - p).clamp(0.0, 1.0),
        method: Method::TokenProbability,
        evidence: Evidence::Tokens {
            distribution: dist.clone(),
        },
    })
}

/// Shannon entropy in bits divided by `log2(n)`, so the maximum is 1
/// regardless of option count. `0 * log 0` is taken as 0.
pub fn normalized_entropy(probabilities: &[f64]) -> f64 {
    let n = probabilities.len();
    if n < 2 {
        return 0.0;
    }
    let h: f64 = probabilities
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.log2())
        .sum();
    (h / (n as f64).log2()).clamp(0.0, 1.0)
}

pub fn entropy_uncertainty(dist: &TokenDistribution) -> UncertaintyEstimate {
    let probs: Vec<f64> = dist.entries.iter().map(|e| e.probability).collect();
    UncertaintyEstimate {
        value: normalized_entropy(&probs),
        method: Method::Entropy,
        evidence: Evidence::Tokens {
            distribution: dist.clone(),
        },
    }
}

static CONFIDENCE_PHRASE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r#"(?i)\bI\s+am\s+(\d+(?:\.\d+)?)\s*(?:%|percent\b)\s*certain\s+that\s+the\s+answer\s+is\s*[:"'`*(\[]*\s*([A-Za-z0-9]+)"#,
    )
    .expect("confidence regex compiles")
});

/// Extracts the first "I am X% certain that the answer is Y" phrase.
/// Accepts "percent" for "%" and decimal X. Never panics.
pub fn parse_self_explained(text: &str) -> Result<ParsedConfidence, GenerationFailure> {
    for caps in CONFIDENCE_PHRASE.captures_iter(text) {
        let Ok(percent) = caps[1].parse::<f64>() else {
            continue;
        };
        if !(0.0..=100.0).contains(&percent) {
            continue;
        }
        return Ok(ParsedConfidence {
            stated_percent: percent,
            answer: caps[2].to_string(),
            matched_text: caps[0].to_string(),
        });
    }
    Err(GenerationFailure)
}

pub fn self_explained_uncertainty(parsed: &ParsedConfidence) -> UncertaintyEstimate {
    UncertaintyEstimate {
        value: (1.0 - parsed.stated_percent / 100.0).clamp(0.0, 1.0),
        method: Method::SelfExplained,
        evidence: Evidence::Confidence {
            parsed: parsed.clone(),
        },
    }
}
