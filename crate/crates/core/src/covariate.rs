//! Multistamp covariate sampling.
//!
//! Covariates for the treatment `E_i` are events preceding it. The union
//! sampler prompts the generator once per timestamp `E_1..E_i` and merges the
//! per-timestamp sets round-robin; the intersection sampler prompts once with
//! the right-side context `E_i..E_n`.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, GenerateParams, LmClient};
use crate::bleu::{self, BleuError};
use crate::event::{Event, EventSequence};

#[derive(Debug, Error)]
pub enum CovariateError {
    #[error("every timestamp produced an empty covariate set")]
    AllSetsEmpty,
    #[error("treatment index {index} is outside 1..{n}")]
    BadIndex { index: usize, n: usize },
    #[error(transparent)]
    Backend(#[from] BackendError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MergeMode {
    Union,
    Intersection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    /// Generations requested per timestamp.
    pub per_timestamp_samples: usize,
    /// Target covariate set size.
    pub n: usize,
    pub mode: MergeMode,
    /// When false only the treatment's own timestamp is sampled.
    pub multistamp: bool,
    pub max_new_tokens: usize,
    pub temperature: f64,
    /// Set from the engine-wide seed.
    #[serde(skip)]
    pub seed: u64,
    pub model: String,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            per_timestamp_samples: 50,
            n: 40,
            mode: MergeMode::Union,
            multistamp: true,
            max_new_tokens: 15,
            temperature: 0.9,
            seed: 0,
            model: "gpt-j-6b".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CovariateSet {
    /// Sorted, deduplicated.
    pub covariates: Vec<Event>,
    /// 1-based timestamps whose samples contained each covariate.
    pub source_timestamps: BTreeMap<Event, BTreeSet<usize>>,
    pub target_size: usize,
}

impl CovariateSet {
    pub fn len(&self) -> usize {
        self.covariates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.covariates.is_empty()
    }

    pub fn diversity(&self) -> Result<f64, BleuError> {
        let texts: Vec<&str> = self.covariates.iter().map(Event::text).collect();
        bleu::self_bleu(&texts, 4)
    }
}

/// Duplicate key: trimmed text with its first character lowercased.
pub fn dedup_key(text: &str) -> String {
    let t = text.trim();
    let mut chars = t.chars();
    match chars.next() {
        Some(c) => c.to_lowercase().chain(chars).collect(),
        None => String::new(),
    }
}

pub fn is_degenerate(text: &str) -> bool {
    let t = text.trim();
    t.chars().count() < 3 || !t.chars().any(char::is_alphabetic)
}

/// Drop degenerate texts, deduplicate, and sort. Among duplicates the
/// lexicographically smallest spelling is kept.
pub fn canonicalize<I, S>(texts: I) -> Vec<Event>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut events: Vec<Event> = texts
        .into_iter()
        .filter(|t| !is_degenerate(t.as_ref()))
        .filter_map(|t| Event::new(t.as_ref()).ok())
        .collect();
    events.sort();
    let mut seen = HashSet::new();
    events.retain(|e| seen.insert(dedup_key(e.text())));
    events
}

/// Round-robin merge of per-timestamp sets (timestamp 1 first). A pick that
/// duplicates an already chosen covariate moves on to that timestamp's next
/// item. Stops at `n` covariates or when every set is exhausted.
pub fn merge_union(sets: &[Vec<Event>], n: usize) -> Result<CovariateSet, CovariateError> {
    if sets.iter().all(Vec::is_empty) {
        return Err(CovariateError::AllSetsEmpty);
    }
    let mut cursors = vec![0usize; sets.len()];
    let mut chosen: Vec<Event> = Vec::new();
    let mut keys = HashSet::new();
    'rounds: while chosen.len() < n {
        let mut progressed = false;
        for (set, cursor) in sets.iter().zip(cursors.iter_mut()) {
            while *cursor < set.len() {
                let candidate = &set[*cursor];
                *cursor += 1;
                if keys.insert(dedup_key(candidate.text())) {
                    chosen.push(candidate.clone());
                    progressed = true;
                    if chosen.len() == n {
                        break 'rounds;
                    }
                    break;
                }
            }
        }
        if !progressed {
            break;
        }
    }
    chosen.sort();

    let mut source_timestamps: BTreeMap<Event, BTreeSet<usize>> = BTreeMap::new();
    let by_key: BTreeMap<String, &Event> = chosen.iter().map(|e| (dedup_key(e.text()), e)).collect();
    for (l, set) in sets.iter().enumerate() {
        for e in set {
            if let Some(&c) = by_key.get(&dedup_key(e.text())) {
                source_timestamps.entry(c.clone()).or_default().insert(l + 1);
            }
        }
    }
    Ok(CovariateSet { covariates: chosen, source_timestamps, target_size: n })
}

pub fn before_prompt(event: &Event) -> String {
    format!("{} Before that,", event.text())
}

pub fn intersection_prompt(events: &[Event]) -> String {
    let joined: Vec<&str> = events.iter().map(Event::text).collect();
    format!("There are temporally ordered events [{}]. Before all events,", joined.join(", "))
}

pub struct CovariateSampler {
    client: LmClient,
    config: SamplerConfig,
}

impl CovariateSampler {
    pub fn new(client: LmClient, config: SamplerConfig) -> Self {
        CovariateSampler { client, config }
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.config
    }

    fn generate(&self, prompt: String, count: usize, seed: u64) -> Result<Vec<Event>, BackendError> {
        let params = GenerateParams {
            prompt,
            num_samples: count,
            max_new_tokens: self.config.max_new_tokens,
            temperature: self.config.temperature,
            seed,
        };
        Ok(canonicalize(self.client.generate(&params, &self.config.model)?))
    }

    /// Events sampled as happening before `event`, canonically ordered.
    pub fn sample_before(&self, event: &Event, count: usize, seed: u64) -> Result<Vec<Event>, BackendError> {
        self.generate(before_prompt(event), count, seed)
    }

    /// One joint prompt over `events` (the treatment and everything after it).
    pub fn sample_intersection(
        &self,
        events: &[Event],
        n: usize,
        seed: u64,
    ) -> Result<CovariateSet, CovariateError> {
        let mut covariates =
            self.generate(intersection_prompt(events), self.config.per_timestamp_samples.max(n), seed)?;
        covariates.truncate(n);
        let source_timestamps = covariates.iter().map(|c| (c.clone(), BTreeSet::from([0]))).collect();
        Ok(CovariateSet { covariates, source_timestamps, target_size: n })
    }

    /// Covariates for treatment `E_index` (1-based) of `sequence`.
    pub fn sample_for(&self, sequence: &EventSequence, index: usize) -> Result<CovariateSet, CovariateError> {
        let n_events = sequence.len();
        if index == 0 || index >= n_events {
            return Err(CovariateError::BadIndex { index, n: n_events });
        }
        let cfg = &self.config;
        match cfg.mode {
            MergeMode::Intersection => {
                let set = self.sample_intersection(&sequence.events[index - 1..], cfg.n, cfg.seed)?;
                if set.is_empty() {
                    return Err(CovariateError::AllSetsEmpty);
                }
                Ok(set)
            }
            MergeMode::Union => {
                let first = if cfg.multistamp { 1 } else { index };
                let sets = (first..=index)
                    .into_par_iter()
                    .map(|l| self.sample_before(sequence.event(l), cfg.per_timestamp_samples, cfg.seed))
                    .collect::<Result<Vec<_>, _>>()?;
                let mut merged = merge_union(&sets, cfg.n)?;
                if first != 1 {
                    // report real timestamps
                    for ts in merged.source_timestamps.values_mut() {
                        *ts = ts.iter().map(|t| t + first - 1).collect();
                    }
                }
                Ok(merged)
            }
        }
    }
}
