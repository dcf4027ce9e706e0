//! End-to-end estimate for one `(E_i, E_n)` pair: covariates, interventions,
//! propensity vectors, matching and the effect estimate.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, LmClient};
use crate::covariate::{CovariateError, CovariateSampler, SamplerConfig};
use crate::estimator::{
    self, CausalEstimate, Diagnostics, EstimatorError, MatchConfig, Normalization, OutcomeScores,
    ScoredCandidate,
};
use crate::event::{Event, EventPair, EventSequence};
use crate::intervention::{InterventionConfig, InterventionError, InterventionGenerator};
use crate::temporal::TemporalPredictor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Covariates,
    Interventions,
    Propensity,
    Matching,
    Ate,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Covariates => "covariates",
            Stage::Interventions => "interventions",
            Stage::Propensity => "propensity",
            Stage::Matching => "matching",
            Stage::Ate => "ate",
        }
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("[covariates] {0}")]
    Covariates(#[source] CovariateError),
    #[error("[interventions] {0}")]
    Interventions(#[source] InterventionError),
    #[error("[{stage}] {source}", stage = .0.as_str(), source = .1)]
    Scoring(Stage, #[source] BackendError),
    #[error("[matching] {0}")]
    Matching(#[source] EstimatorError),
    #[error("treatment index {index} is outside 1..{n} in sequence `{sequence}`")]
    BadIndex { sequence: String, index: usize, n: usize },
}

impl PipelineError {
    pub fn stage(&self) -> Option<Stage> {
        match self {
            PipelineError::Covariates(_) => Some(Stage::Covariates),
            PipelineError::Interventions(_) => Some(Stage::Interventions),
            PipelineError::Scoring(s, _) => Some(*s),
            PipelineError::Matching(_) => Some(Stage::Matching),
            PipelineError::BadIndex { .. } => None,
        }
    }

    /// The underlying backend failure, if that is what went wrong.
    pub fn backend_error(&self) -> Option<&BackendError> {
        match self {
            PipelineError::Covariates(CovariateError::Backend(e))
            | PipelineError::Interventions(InterventionError::Backend(e))
            | PipelineError::Scoring(_, e) => Some(e),
            _ => None,
        }
    }
}

/// Everything computed for one pair, kept for the per-pair trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairTrace {
    pub pair: EventPair,
    pub covariates: Vec<Event>,
    pub interventions: Vec<Event>,
    pub estimate: CausalEstimate,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub temporal_model: String,
    pub sampler: SamplerConfig,
    pub interventions: InterventionConfig,
    pub matching: MatchConfig,
}

pub struct Pipeline {
    sampler: CovariateSampler,
    generator: InterventionGenerator,
    predictor: TemporalPredictor,
    matching: MatchConfig,
}

struct Propensity {
    values: Vec<f64>,
    zeros: usize,
    degenerate: usize,
}

impl Pipeline {
    pub fn new(client: LmClient, config: PipelineConfig) -> Result<Self, EstimatorError> {
        config.matching.validate()?;
        Ok(Pipeline {
            sampler: CovariateSampler::new(client.clone(), config.sampler),
            generator: InterventionGenerator::new(client.clone(), config.interventions),
            predictor: TemporalPredictor::new(client, config.temporal_model),
            matching: config.matching,
        })
    }

    pub fn predictor(&self) -> &TemporalPredictor {
        &self.predictor
    }

    pub fn sampler(&self) -> &CovariateSampler {
        &self.sampler
    }

    pub fn generator(&self) -> &InterventionGenerator {
        &self.generator
    }

    pub fn matching(&self) -> &MatchConfig {
        &self.matching
    }

    fn outcome(
        &self,
        subject: &Event,
        outcome: &Event,
        stage: Stage,
    ) -> Result<OutcomeScores, PipelineError> {
        let scoring = |e| PipelineError::Scoring(stage, e);
        Ok(OutcomeScores {
            forward: self.predictor.f(subject, outcome).map_err(scoring)?,
            backward: self.predictor.f(outcome, subject).map_err(scoring)?,
        })
    }

    fn propensity(
        &self,
        subject: &Event,
        covariates: &[Event],
        marginal: &[f64],
    ) -> Result<Propensity, PipelineError> {
        let simplify = self.matching.has(Normalization::S);
        let scoring = |e| PipelineError::Scoring(Stage::Propensity, e);
        let mut degenerate = 0;
        let mut score = |a: &Event, b: &Event| -> Result<f64, PipelineError> {
            let s = self.predictor.score(a, b, simplify).map_err(scoring)?;
            degenerate += s.degenerate as usize;
            Ok(s.value)
        };
        if self.matching.has(Normalization::D) {
            let values = covariates.iter().map(|x| score(subject, x)).collect::<Result<_, _>>()?;
            return Ok(Propensity { values, zeros: 0, degenerate });
        }
        let joint: Vec<f64> = covariates.iter().map(|x| score(x, subject)).collect::<Result<_, _>>()?;
        let (values, zeros) =
            estimator::propensity_values(&joint, marginal, self.matching.has(Normalization::Q))
                .map_err(PipelineError::Matching)?;
        Ok(Propensity { values, zeros, degenerate })
    }

    /// Estimate the effect of `E_index` (1-based) on the final event.
    pub fn estimate_pair(&self, sequence: &EventSequence, index: usize) -> Result<PairTrace, PipelineError> {
        let n = sequence.len();
        if index == 0 || index >= n {
            return Err(PipelineError::BadIndex { sequence: sequence.id.clone(), index, n });
        }
        let pair = EventPair {
            sequence_id: sequence.id.clone(),
            cause_index: index,
            effect_index: n,
            gold: sequence.labels.get(index - 1).copied(),
        };
        let treatment = sequence.event(index);
        let outcome = sequence.last();
        let treatment_outcome = self.outcome(treatment, outcome, Stage::Ate)?;

        if !self.generator.config().enabled {
            let estimate =
                estimator::estimate(&[], treatment_outcome, &[], &self.matching, Diagnostics::default())
                    .map_err(PipelineError::Matching)?;
            return Ok(PairTrace { pair, covariates: vec![], interventions: vec![], estimate });
        }

        let covariates = if self.matching.keep_all {
            vec![]
        } else {
            self.sampler.sample_for(sequence, index).map_err(PipelineError::Covariates)?.covariates
        };
        let interventions =
            self.generator.generate(treatment).map_err(PipelineError::Interventions)?.interventions;

        let simplify = self.matching.has(Normalization::S);
        let mut diagnostics = Diagnostics { covariates: covariates.len(), ..Default::default() };
        let (marginal, treatment_q) = if self.matching.keep_all {
            (vec![], vec![])
        } else {
            let mut marginal = Vec::with_capacity(covariates.len());
            for x in &covariates {
                let s = self
                    .predictor
                    .score(x, treatment, simplify)
                    .map_err(|e| PipelineError::Scoring(Stage::Propensity, e))?;
                diagnostics.degenerate_scores += s.degenerate as usize;
                marginal.push(s.value);
            }
            let q = self.propensity(treatment, &covariates, &marginal)?;
            diagnostics.zero_denominators += q.zeros;
            (marginal, q.values)
        };

        let scored = interventions
            .par_iter()
            .map(|a| {
                let q = if self.matching.keep_all {
                    Propensity { values: vec![], zeros: 0, degenerate: 0 }
                } else {
                    self.propensity(a, &covariates, &marginal)?
                };
                let outcome = self.outcome(a, outcome, Stage::Ate)?;
                Ok((
                    ScoredCandidate { intervention: a.clone(), propensity: q.values, outcome },
                    q.zeros,
                    q.degenerate,
                ))
            })
            .collect::<Result<Vec<_>, PipelineError>>()?;
        let mut candidates = Vec::with_capacity(scored.len());
        for (c, zeros, degenerate) in scored {
            diagnostics.zero_denominators += zeros;
            diagnostics.degenerate_scores += degenerate;
            candidates.push(c);
        }

        let estimate =
            estimator::estimate(&treatment_q, treatment_outcome, &candidates, &self.matching, diagnostics)
                .map_err(PipelineError::Matching)?;
        Ok(PairTrace { pair, covariates, interventions, estimate })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::SyntheticBackend;
    use std::sync::Arc;

    fn seq() -> EventSequence {
        let events =
            ["Emma woke up late.", "She skipped breakfast.", "Emma felt hungry.", "She bought a snack."]
                .iter()
                .map(|t| Event::new(t).unwrap())
                .collect();
        EventSequence::new("s1", events, vec![false, true, false], crate::event::Split::Testing).unwrap()
    }

    fn pipeline(f: impl FnOnce(&mut PipelineConfig)) -> Pipeline {
        let mut cfg = PipelineConfig { temporal_model: "tp".into(), ..Default::default() };
        cfg.sampler.per_timestamp_samples = 6;
        cfg.sampler.n = 6;
        cfg.interventions.cap = 8;
        f(&mut cfg);
        Pipeline::new(LmClient::new(Arc::new(SyntheticBackend)), cfg).unwrap()
    }

    #[test]
    fn interventions_off_gives_treatment_score() {
        let p = pipeline(|c| c.interventions.enabled = false);
        let t = p.estimate_pair(&seq(), 2).unwrap();
        assert_eq!(t.estimate.delta, t.estimate.treatment_score);
        assert!(t.interventions.is_empty());
    }

    #[test]
    fn estimate_is_deterministic() {
        let a = pipeline(|_| {}).estimate_pair(&seq(), 2).unwrap();
        let b = pipeline(|_| {}).estimate_pair(&seq(), 2).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert!(!a.covariates.is_empty());
        assert!(!a.interventions.is_empty());
        assert_eq!(a.estimate.matched.len() + a.estimate.rejected, a.interventions.len());
    }

    #[test]
    fn keep_all_averages_every_intervention() {
        let t = pipeline(|c| c.matching.keep_all = true).estimate_pair(&seq(), 1).unwrap();
        assert_eq!(t.estimate.matched.len(), t.interventions.len());
        assert!(t.covariates.is_empty());
        let mean = t.estimate.matched.iter().map(|m| m.score).sum::<f64>() / t.estimate.matched.len() as f64;
        assert_eq!(t.estimate.delta, t.estimate.treatment_score - mean);
    }

    #[test]
    fn bad_index_rejected() {
        let p = pipeline(|_| {});
        assert!(matches!(p.estimate_pair(&seq(), 0), Err(PipelineError::BadIndex { .. })));
        assert!(matches!(p.estimate_pair(&seq(), 4), Err(PipelineError::BadIndex { .. })));
    }

    #[test]
    fn incompatible_config_rejected() {
        let mut cfg = PipelineConfig::default();
        cfg.matching.normalizations = [Normalization::D, Normalization::Q].into();
        assert!(Pipeline::new(LmClient::new(Arc::new(SyntheticBackend)), cfg).is_err());
    }
}
