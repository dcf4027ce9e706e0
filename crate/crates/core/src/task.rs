//! Top-k labeling, metrics, scorers and experiment orchestration.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::backend::{canonical, BackendError, LmClient};
use crate::event::{DatasetError, EventPair, EventSequence, Split, SplitCounts};
use crate::pipeline::{PairTrace, Pipeline, PipelineError};

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("sequence `{0}` has no gold labels, so k is unknown")]
    KUnknown(String),
    #[error("sequence `{sequence}` has {expected} candidates but {got} scores")]
    ScoreCountMismatch { sequence: String, expected: usize, got: usize },
    #[error("predictions and gold labels are misaligned: {0} vs {1}")]
    Misaligned(usize, usize),
    #[error("expected sequences with a single candidate count, found {0:?}")]
    UnsupportedSequenceLength(Vec<usize>),
    #[error("sequence `{sequence}`, event {index}: {source}")]
    Pipeline {
        sequence: String,
        index: usize,
        #[source]
        source: PipelineError,
    },
    #[error("sequence `{sequence}`, event {index}: {source}")]
    Backend {
        sequence: String,
        index: usize,
        #[source]
        source: BackendError,
    },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

impl TaskError {
    pub fn backend_error(&self) -> Option<&BackendError> {
        match self {
            TaskError::Backend { source, .. } => Some(source),
            TaskError::Pipeline { source, .. } => source.backend_error(),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub pair: EventPair,
    pub score: f64,
    pub label: bool,
}

/// Label the `k` highest-scoring candidates positive, `k` taken from gold.
/// Ties go to the lower event index.
pub fn rank_and_label(sequence: &EventSequence, scores: &[f64]) -> Result<Vec<Prediction>, TaskError> {
    let k = sequence.k().ok_or_else(|| TaskError::KUnknown(sequence.id.clone()))?;
    let pairs = sequence.pairs();
    if scores.len() != pairs.len() {
        return Err(TaskError::ScoreCountMismatch {
            sequence: sequence.id.clone(),
            expected: pairs.len(),
            got: scores.len(),
        });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut labels = vec![false; scores.len()];
    for &i in &order[..k] {
        labels[i] = true;
    }
    Ok(pairs
        .into_iter()
        .zip(scores)
        .zip(labels)
        .map(|((pair, &score), label)| Prediction { pair, score, label })
        .collect())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn from_labels(predicted: &[bool], gold: &[bool]) -> Self {
        let mut c = Confusion::default();
        for (&p, &g) in predicted.iter().zip(gold) {
            match (p, g) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn accuracy(&self) -> f64 {
        if self.total() == 0 {
            0.0
        } else {
            (self.tp + self.tn) as f64 / self.total() as f64
        }
    }

    pub fn precision(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fn_)
    }

    /// Positive-class F1; `None` when there are no positives on either side.
    pub fn f1(&self) -> Option<f64> {
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }

    pub fn negative_f1(&self) -> Option<f64> {
        ratio(2 * self.tn, 2 * self.tn + self.fp + self.fn_)
    }
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KBreakdown {
    pub sequences: usize,
    pub accuracy: f64,
    pub confusion: Confusion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub split: String,
    pub accuracy: f64,
    pub f1: f64,
    pub macro_f1: f64,
    pub precision: f64,
    pub recall: f64,
    /// Set when a class had no examples on either side; its F1 is reported as 0.
    pub f1_undefined: bool,
    pub confusion: Confusion,
    pub per_k: BTreeMap<usize, KBreakdown>,
    pub config: Value,
}

/// Pairwise metrics. `gold` is aligned with `predictions`; per-k groups use the
/// number of gold positives in each sequence.
pub fn evaluate(predictions: &[Prediction], gold: &[bool]) -> Result<MetricsReport, TaskError> {
    if predictions.len() != gold.len() {
        return Err(TaskError::Misaligned(predictions.len(), gold.len()));
    }
    let predicted: Vec<bool> = predictions.iter().map(|p| p.label).collect();
    let confusion = Confusion::from_labels(&predicted, gold);

    let mut by_seq: BTreeMap<&str, (Vec<bool>, Vec<bool>)> = BTreeMap::new();
    for (p, &g) in predictions.iter().zip(gold) {
        let e = by_seq.entry(&p.pair.sequence_id).or_default();
        e.0.push(p.label);
        e.1.push(g);
    }
    let mut per_k: BTreeMap<usize, KBreakdown> = BTreeMap::new();
    for (pred, g) in by_seq.values() {
        let k = g.iter().filter(|&&x| x).count();
        let c = Confusion::from_labels(pred, g);
        let entry = per_k.entry(k).or_insert(KBreakdown {
            sequences: 0,
            accuracy: 0.0,
            confusion: Confusion::default(),
        });
        entry.sequences += 1;
        entry.confusion.tp += c.tp;
        entry.confusion.fp += c.fp;
        entry.confusion.tn += c.tn;
        entry.confusion.fn_ += c.fn_;
    }
    for b in per_k.values_mut() {
        b.accuracy = b.confusion.accuracy();
    }

    let (pos, neg) = (confusion.f1(), confusion.negative_f1());
    Ok(MetricsReport {
        split: String::new(),
        accuracy: confusion.accuracy(),
        f1: pos.unwrap_or(0.0),
        macro_f1: 0.5 * (pos.unwrap_or(0.0) + neg.unwrap_or(0.0)),
        precision: confusion.precision().unwrap_or(0.0),
        recall: confusion.recall().unwrap_or(0.0),
        f1_undefined: pos.is_none() || neg.is_none(),
        confusion,
        per_k,
        config: Value::Null,
    })
}

fn binomial(n: usize, k: usize) -> u128 {
    let k = k.min(n - k);
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomExpectation {
    pub accuracy: f64,
    pub f1: f64,
    /// Expected pairwise accuracy of a uniform k-subset, per k.
    pub per_k_accuracy: BTreeMap<usize, f64>,
}

/// Expected true positives for a uniform `k`-subset of `m`
/// candidates against `k` fixed gold positives, by enumerating every subset.
fn expected_true_positives(m: usize, k: usize) -> f64 {
    let mut total = 0u128;
    let mut count = 0u128;
    for mask in 0u64..(1u64 << m) {
        if mask.count_ones() as usize == k {
            // gold positives are the first k candidates
            total += (mask & ((1u64 << k) - 1)).count_ones() as u128;
            count += 1;
        }
    }
    debug_assert_eq!(count, binomial(m, k));
    total as f64 / count as f64
}

/// Exact expectation of a scorer that labels a uniformly random k-subset of
/// each sequence positive.
pub fn random_baseline_expectation(counts: &SplitCounts) -> Result<RandomExpectation, TaskError> {
    if counts.candidate_counts.len() != 1 {
        return Err(TaskError::UnsupportedSequenceLength(counts.candidate_counts.iter().copied().collect()));
    }
    let m = *counts.candidate_counts.iter().next().unwrap();
    if m > 20 {
        return Err(TaskError::UnsupportedSequenceLength(vec![m]));
    }
    let mut per_k_accuracy = BTreeMap::new();
    let (mut correct, mut tp, mut pairs) = (0.0, 0.0, 0usize);
    for (&k, &n_seq) in &counts.per_k {
        let etp = expected_true_positives(m, k);
        // each false positive displaces one true positive
        let efp = k as f64 - etp;
        let acc = 1.0 - 2.0 * efp / m as f64;
        per_k_accuracy.insert(k, acc);
        correct += acc * m as f64 * n_seq as f64;
        tp += etp * n_seq as f64;
        pairs += m * n_seq;
    }
    let positives = counts.positives as f64;
    Ok(RandomExpectation {
        accuracy: if pairs == 0 { 0.0 } else { correct / pairs as f64 },
        f1: if positives == 0.0 { 0.0 } else { tp / positives },
        per_k_accuracy,
    })
}

/// `If E_1, E_2, ..., E_n, E_j because E_i` with terminal punctuation of each
/// event dropped and a single period at the end.
pub fn clm_prompt(sequence: &EventSequence, cause: usize, effect: usize) -> String {
    let strip = |e: &crate::event::Event| e.text().trim_end_matches(['.', '!', '?']).trim_end().to_owned();
    let context: Vec<String> = sequence.events.iter().map(strip).collect();
    format!(
        "If {}, {} because {}.",
        context.join(", "),
        strip(sequence.event(effect)),
        strip(sequence.event(cause))
    )
}

/// `exp(-mean logprob)`.
pub fn perplexity(logprobs: &[f64]) -> f64 {
    if logprobs.is_empty() {
        return 1.0;
    }
    (-logprobs.iter().sum::<f64>() / logprobs.len() as f64).exp()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub pair: EventPair,
    /// Higher means more likely causal.
    pub score: f64,
    pub label: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub perplexity: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trace: Option<PairTrace>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scored {
    pub score: f64,
    pub perplexity: Option<f64>,
    pub trace: Option<PairTrace>,
}

impl Scored {
    fn plain(score: f64) -> Self {
        Scored { score, perplexity: None, trace: None }
    }
}

pub trait PairScorer: Send + Sync {
    fn name(&self) -> &str;
    /// Score `E_index` (1-based) as a cause of the final event.
    fn score(&self, sequence: &EventSequence, index: usize) -> Result<Scored, TaskError>;
}

pub struct ColaScorer {
    pub pipeline: Pipeline,
}

impl PairScorer for ColaScorer {
    fn name(&self) -> &str {
        "cola"
    }

    fn score(&self, sequence: &EventSequence, index: usize) -> Result<Scored, TaskError> {
        let trace = self.pipeline.estimate_pair(sequence, index).map_err(|source| TaskError::Pipeline {
            sequence: sequence.id.clone(),
            index,
            source,
        })?;
        Ok(Scored { score: trace.estimate.delta, perplexity: None, trace: Some(trace) })
    }
}

/// Lower perplexity of the causal prompt ranks higher.
pub struct ClmPerplexityScorer {
    pub client: LmClient,
    pub model: String,
}

impl PairScorer for ClmPerplexityScorer {
    fn name(&self) -> &str {
        "clm"
    }

    fn score(&self, sequence: &EventSequence, index: usize) -> Result<Scored, TaskError> {
        let text = clm_prompt(sequence, index, sequence.len());
        let logprobs = self.client.score_tokens(&text, &self.model).map_err(|source| TaskError::Backend {
            sequence: sequence.id.clone(),
            index,
            source,
        })?;
        let ppl = perplexity(&logprobs);
        Ok(Scored { score: -ppl, perplexity: Some(ppl), trace: None })
    }
}

/// Average pseudo log-likelihood of the causal prompt under a masked LM.
pub struct ClozeScorer {
    pub client: LmClient,
    pub model: String,
}

impl PairScorer for ClozeScorer {
    fn name(&self) -> &str {
        "cloze"
    }

    fn score(&self, sequence: &EventSequence, index: usize) -> Result<Scored, TaskError> {
        let text = clm_prompt(sequence, index, sequence.len());
        self.client
            .pseudo_loglik(&text, &self.model)
            .map(Scored::plain)
            .map_err(|source| TaskError::Backend { sequence: sequence.id.clone(), index, source })
    }
}

/// Uniform scores keyed by `(seed, sequence id, index)`.
pub struct RandomScorer {
    pub seed: u64,
}

impl PairScorer for RandomScorer {
    fn name(&self) -> &str {
        "random"
    }

    fn score(&self, sequence: &EventSequence, index: usize) -> Result<Scored, TaskError> {
        let digest = canonical::sha256(format!("{}\u{0}{index}", sequence.id).as_bytes());
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(u64::from_le_bytes(digest[..8].try_into().unwrap()));
        Ok(Scored::plain(rng.random::<f64>()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub scorer: String,
    /// One report per split present in the data, then `all`.
    pub reports: Vec<MetricsReport>,
    pub pairs: Vec<PairRecord>,
}

/// Score every pair, label top-k per sequence and evaluate per split.
/// Sequences must be labeled. Output order follows the input order.
pub fn run_experiment(
    dataset: &[EventSequence],
    scorer: &dyn PairScorer,
    config: &Value,
) -> Result<ExperimentReport, TaskError> {
    for seq in dataset {
        if !seq.is_labeled() {
            return Err(TaskError::KUnknown(seq.id.clone()));
        }
    }
    let jobs: Vec<(usize, usize)> =
        dataset.iter().enumerate().flat_map(|(s, seq)| (1..seq.len()).map(move |i| (s, i))).collect();
    let scored =
        jobs.par_iter().map(|&(s, i)| scorer.score(&dataset[s], i)).collect::<Result<Vec<_>, _>>()?;

    let mut scored = scored.into_iter();
    let mut records = Vec::with_capacity(jobs.len());
    let mut by_split: BTreeMap<Split, (Vec<Prediction>, Vec<bool>)> = BTreeMap::new();
    let mut all: (Vec<Prediction>, Vec<bool>) = Default::default();
    for seq in dataset {
        let items: Vec<Scored> = scored.by_ref().take(seq.len() - 1).collect();
        let scores: Vec<f64> = items.iter().map(|s| s.score).collect();
        let preds = rank_and_label(seq, &scores)?;
        let entry = by_split.entry(seq.split).or_default();
        for (p, item) in preds.into_iter().zip(items) {
            let gold = p.pair.gold.unwrap_or(false);
            entry.0.push(p.clone());
            entry.1.push(gold);
            all.0.push(p.clone());
            all.1.push(gold);
            records.push(PairRecord {
                pair: p.pair,
                score: p.score,
                label: p.label,
                perplexity: item.perplexity,
                trace: item.trace,
            });
        }
    }

    let mut reports = Vec::new();
    for (split, (preds, gold)) in &by_split {
        let mut r = evaluate(preds, gold)?;
        r.split = split.as_str().to_owned();
        r.config = config.clone();
        reports.push(r);
    }
    let mut r = evaluate(&all.0, &all.1)?;
    r.split = "all".to_owned();
    r.config = config.clone();
    reports.push(r);

    Ok(ExperimentReport { scorer: scorer.name().to_owned(), reports, pairs: records })
}

/// Assign `validation`/`testing` halves, stratified by k. Within each k the
/// sequences are shuffled with `seed` and alternately dealt out.
pub fn stratified_split(dataset: &mut [EventSequence], seed: u64) -> Result<(), TaskError> {
    use rand::seq::SliceRandom;
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, seq) in dataset.iter().enumerate() {
        let k = seq.k().ok_or_else(|| TaskError::KUnknown(seq.id.clone()))?;
        groups.entry(k).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut flip = false;
    for idx in groups.values_mut() {
        idx.shuffle(&mut rng);
        for &i in idx.iter() {
            dataset[i].split = if flip { Split::Testing } else { Split::Validation };
            flip = !flip;
        }
    }
    Ok(())
}
