//! Temporal propensity matching and the matched treatment-effect estimate.
//!
//! For a treatment `E_i`, outcome `E_n`, covariates `X` and interventions `A`:
//!
//! ```text
//! q(X; A)[l] = f(X_l, A) / f(X_l, E_i)
//! A'         = { A : ||q(X; A) - q(X; E_i)||_2 / |X| <= eps }
//! delta      = f(E_i, E_n) - mean_{A in A'} f(A, E_n)      (delta = f(E_i, E_n) if A' is empty)
//! ```
//!
//! Normalization switches:
//!
//! * `D`: use `f(A, X_l)` directly as the propensity vector.
//! * `S`: use the before/after-only score when building propensity vectors.
//! * `Q`: normalize numerator and denominator scores over the covariate set.
//! * `C`: replace each estimand score `f(a, E_n)` by `(f(a, E_n) + f(E_n, a)) / 2`.
//! * `E`: replace each estimand score by `f(a, E_n) / (f(a, E_n) + f(E_n, a))`.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::event::Event;

#[derive(Debug, Error, PartialEq)]
pub enum EstimatorError {
    #[error("propensity vectors differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("normalizations {0} and {1} cannot be combined")]
    IncompatibleNormalizations(Normalization, Normalization),
    #[error("epsilon must be a finite non-negative number, got {0}")]
    BadEpsilon(f64),
    #[error("unknown normalization `{0}`")]
    UnknownNormalization(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Normalization {
    /// Direct matching on raw temporal scores.
    D,
    /// Before/after score simplification.
    S,
    /// Propensity covariate normalization.
    Q,
    /// Co-occurrence normalization of the estimand.
    C,
    /// Estimand normalization.
    E,
}

impl Normalization {
    pub fn as_char(self) -> char {
        match self {
            Normalization::D => 'D',
            Normalization::S => 'S',
            Normalization::Q => 'Q',
            Normalization::C => 'C',
            Normalization::E => 'E',
        }
    }
}

impl fmt::Display for Normalization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_char())
    }
}

impl FromStr for Normalization {
    type Err = EstimatorError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "D" => Ok(Normalization::D),
            "S" => Ok(Normalization::S),
            "Q" => Ok(Normalization::Q),
            "C" => Ok(Normalization::C),
            "E" => Ok(Normalization::E),
            _ => Err(EstimatorError::UnknownNormalization(s.to_owned())),
        }
    }
}

impl TryFrom<String> for Normalization {
    type Error = EstimatorError;
    fn try_from(value: String) -> Result<Self, Self::Error> {
        value.parse()
    }
}

impl From<Normalization> for String {
    fn from(n: Normalization) -> String {
        n.to_string()
    }
}

/// What to do when no intervention survives matching.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmptyMatchedPolicy {
    /// `delta = f(E_i, E_n)`: temporal precedence alone.
    #[default]
    TreatmentOnly,
}

/// Best thresholds reported for temporal predictors built on the large
/// checkpoints of each model family.
pub fn recommended_epsilon(model: &str) -> Option<f64> {
    let m = model.to_ascii_lowercase();
    if m.contains("deberta") {
        Some(0.014)
    } else if m.contains("roberta") {
        Some(0.001)
    } else if m.contains("bert") {
        Some(0.006)
    } else {
        None
    }
}

/// Range in which the threshold usually works well.
pub const RECOMMENDED_EPSILON_RANGE: (f64, f64) = (0.0, 0.1);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatchConfig {
    pub epsilon: f64,
    pub normalizations: BTreeSet<Normalization>,
    /// Keep every intervention regardless of distance (no covariate adjustment).
    pub keep_all: bool,
    pub empty_matched_policy: EmptyMatchedPolicy,
}

impl Default for MatchConfig {
    fn default() -> Self {
        MatchConfig {
            epsilon: 0.006,
            normalizations: BTreeSet::new(),
            keep_all: false,
            empty_matched_policy: EmptyMatchedPolicy::TreatmentOnly,
        }
    }
}

impl MatchConfig {
    pub fn has(&self, n: Normalization) -> bool {
        self.normalizations.contains(&n)
    }

    pub fn validate(&self) -> Result<(), EstimatorError> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(EstimatorError::BadEpsilon(self.epsilon));
        }
        if self.has(Normalization::D) && self.has(Normalization::Q) {
            return Err(EstimatorError::IncompatibleNormalizations(Normalization::D, Normalization::Q));
        }
        // Both at once collapse every estimand score to 1/2.
        if self.has(Normalization::C) && self.has(Normalization::E) {
            return Err(EstimatorError::IncompatibleNormalizations(Normalization::C, Normalization::E));
        }
        Ok(())
    }
}

fn normalize_over_set(scores: &[f64]) -> Option<Vec<f64>> {
    let total: f64 = scores.iter().sum();
    (total > 0.0).then(|| scores.iter().map(|s| s / total).collect())
}

/// Conditional-probability propensity from per-covariate scores.
///
/// `joint[l] = f(X_l, subject)`, `marginal[l] = f(X_l, anchor)`. With
/// `covariate_normalized` both are first normalized to sum to one over the
/// covariate set. Components with a zero denominator become 0. Values may
/// exceed 1 since the marginal is only approximated.
pub fn propensity_values(
    joint: &[f64],
    marginal: &[f64],
    covariate_normalized: bool,
) -> Result<(Vec<f64>, usize), EstimatorError> {
    if joint.len() != marginal.len() {
        return Err(EstimatorError::LengthMismatch(joint.len(), marginal.len()));
    }
    let (joint, marginal) = if covariate_normalized {
        match (normalize_over_set(joint), normalize_over_set(marginal)) {
            (Some(j), Some(m)) => (j, m),
            (None, Some(m)) => (vec![0.0; joint.len()], m),
            (_, None) => return Ok((vec![0.0; joint.len()], joint.len())),
        }
    } else {
        (joint.to_vec(), marginal.to_vec())
    };
    let mut zeros = 0;
    let values = joint
        .iter()
        .zip(&marginal)
        .map(|(&j, &m)| {
            if m > 0.0 {
                j / m
            } else {
                zeros += 1;
                0.0
            }
        })
        .collect();
    Ok((values, zeros))
}

/// `||a - b||_2 / len`. Empty vectors are at distance 0.
pub fn scaled_distance(a: &[f64], b: &[f64]) -> Result<f64, EstimatorError> {
    if a.len() != b.len() {
        return Err(EstimatorError::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Ok(0.0);
    }
    let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sq.sqrt() / a.len() as f64)
}

/// Indices (in input order) and distances of candidates within `epsilon` of
/// the treatment vector.
pub fn matched_set(
    treatment: &[f64],
    candidates: &[Vec<f64>],
    epsilon: f64,
) -> Result<Vec<(usize, f64)>, EstimatorError> {
    let mut out = Vec::new();
    for (i, q) in candidates.iter().enumerate() {
        let d = scaled_distance(q, treatment)?;
        if d <= epsilon {
            out.push((i, d));
        }
    }
    Ok(out)
}

/// Both directions of a temporal score against the outcome event:
/// `forward = f(a, E_n)`, `backward = f(E_n, a)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutcomeScores {
    pub forward: f64,
    pub backward: f64,
}

/// The score entering the estimand after C/E normalization. E with a zero
/// total yields 0.5.
pub fn estimand_score(scores: OutcomeScores, config: &MatchConfig) -> f64 {
    if config.has(Normalization::C) {
        0.5 * (scores.forward + scores.backward)
    } else if config.has(Normalization::E) {
        let total = scores.forward + scores.backward;
        if total > 0.0 {
            scores.forward / total
        } else {
            0.5
        }
    } else {
        scores.forward
    }
}

/// `treatment - mean(matched)`; an empty matched set leaves `treatment`.
pub fn ate(treatment: f64, matched: &[f64]) -> f64 {
    if matched.is_empty() {
        treatment
    } else {
        treatment - matched.iter().sum::<f64>() / matched.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchedIntervention {
    pub intervention: Event,
    /// Estimand score of the intervention against the outcome.
    pub score: f64,
    /// `None` when matching was bypassed.
    pub distance: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub covariates: usize,
    pub interventions: usize,
    pub zero_denominators: usize,
    pub degenerate_scores: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CausalEstimate {
    pub delta: f64,
    pub treatment_score: f64,
    pub matched: Vec<MatchedIntervention>,
    pub rejected: usize,
    pub diagnostics: Diagnostics,
    pub config_snapshot: MatchConfig,
}

/// Everything the estimate needs, already scored.
#[derive(Debug, Clone)]
pub struct ScoredCandidate {
    pub intervention: Event,
    pub propensity: Vec<f64>,
    pub outcome: OutcomeScores,
}

/// Match candidates against the treatment propensity and compute the estimate.
pub fn estimate(
    treatment_propensity: &[f64],
    treatment_outcome: OutcomeScores,
    candidates: &[ScoredCandidate],
    config: &MatchConfig,
    mut diagnostics: Diagnostics,
) -> Result<CausalEstimate, EstimatorError> {
    config.validate()?;
    let treatment_score = estimand_score(treatment_outcome, config);
    let matched: Vec<MatchedIntervention> = if config.keep_all {
        candidates
            .iter()
            .map(|c| MatchedIntervention {
                intervention: c.intervention.clone(),
                score: estimand_score(c.outcome, config),
                distance: None,
            })
            .collect()
    } else {
        let vectors: Vec<Vec<f64>> = candidates.iter().map(|c| c.propensity.clone()).collect();
        matched_set(treatment_propensity, &vectors, config.epsilon)?
            .into_iter()
            .map(|(i, d)| MatchedIntervention {
                intervention: candidates[i].intervention.clone(),
                score: estimand_score(candidates[i].outcome, config),
                distance: Some(d),
            })
            .collect()
    };
    let scores: Vec<f64> = matched.iter().map(|m| m.score).collect();
    diagnostics.interventions = candidates.len();
    Ok(CausalEstimate {
        delta: ate(treatment_score, &scores),
        treatment_score,
        rejected: candidates.len() - matched.len(),
        matched,
        diagnostics,
        config_snapshot: config.clone(),
    })
}
