//! Temporal fine-tuning corpus: adjacent story events become `before` and
//! `after` examples; swapping one side for an event from another story gives
//! a `[none]` negative.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{AFTER, BEFORE, NONE};
use crate::backend::MASK_TOKEN;
use crate::event::{Event, EventSequence};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("need at least two stories, got {0}")]
    CorpusTooSmall(usize),
    #[error("negative ratio must be positive and finite, got {0}")]
    BadNegativeRatio(f64),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive,
    Negative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusSplit {
    Train,
    Validation,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinetuneExample {
    pub masked_text: String,
    pub target: String,
    pub polarity: Polarity,
    pub split: CorpusSplit,
    /// Story the example was built from; not serialized.
    #[serde(skip)]
    pub story_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    /// Stop after this many examples; `None` uses every story.
    pub target_size: Option<usize>,
    /// Negatives per positive.
    pub negative_ratio: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig { target_size: Some(800_000), negative_ratio: 1.0, seed: 0 }
    }
}

/// Trainer settings handed to the external fine-tuning script.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneHyperparams {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub added_special_tokens: Vec<String>,
}

impl Default for FinetuneHyperparams {
    fn default() -> Self {
        FinetuneHyperparams {
            learning_rate: 1e-5,
            batch_size: 256,
            epochs: 10,
            added_special_tokens: vec![NONE.to_owned()],
        }
    }
}

/// `(train, validation, test)` sizes in 98:1:1 proportion.
pub fn split_sizes(total: usize) -> (usize, usize, usize) {
    let held_out = (total + 50) / 100;
    let test = held_out.min(total);
    let validation = held_out.min(total - test);
    (total - validation - test, validation, test)
}

fn story_rng(seed: u64, story: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(story as u64 + 1);
    rng
}

fn masked(first: &Event, second: &Event) -> String {
    format!("{} {MASK_TOKEN} {}", first.text(), second.text())
}

struct Draft {
    story: usize,
    masked_text: String,
    target: &'static str,
    polarity: Polarity,
}

fn story_examples(stories: &[EventSequence], idx: usize, ratio: f64, seed: u64) -> Vec<Draft> {
    let story = &stories[idx];
    let mut rng = story_rng(seed, idx);
    let mut out = Vec::new();
    let mut adjacent = Vec::new();
    for w in story.events.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        out.push(Draft {
            story: idx,
            masked_text: masked(a, b),
            target: BEFORE,
            polarity: Polarity::Positive,
        });
        out.push(Draft {
            story: idx,
            masked_text: masked(b, a),
            target: AFTER,
            polarity: Polarity::Positive,
        });
        adjacent.push((a, b));
        adjacent.push((b, a));
    }
    let negatives = (adjacent.len() as f64 * ratio).round() as usize;
    for j in 0..negatives {
        let (left, right) = adjacent[j % adjacent.len()];
        let mut donor = rng.random_range(0..stories.len() - 1);
        if donor >= idx {
            donor += 1;
        }
        let donor_events = &stories[donor].events;
        let replacement = &donor_events[rng.random_range(0..donor_events.len())];
        let text = if rng.random_bool(0.5) { masked(replacement, right) } else { masked(left, replacement) };
        out.push(Draft { story: idx, masked_text: text, target: NONE, polarity: Polarity::Negative });
    }
    out
}

/// Build the corpus. Output is a pure function of `(stories, config)`.
pub fn build_finetune_corpus(
    stories: &[EventSequence],
    config: &CorpusConfig,
) -> Result<Vec<FinetuneExample>, CorpusError> {
    if stories.len() < 2 {
        return Err(CorpusError::CorpusTooSmall(stories.len()));
    }
    if !(config.negative_ratio > 0.0 && config.negative_ratio.is_finite()) {
        return Err(CorpusError::BadNegativeRatio(config.negative_ratio));
    }
    let limit = config.target_size.unwrap_or(usize::MAX);
    let mut order: Vec<usize> = (0..stories.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed));

    let mut drafts = Vec::new();
    for idx in order {
        if drafts.len() >= limit {
            break;
        }
        drafts.extend(story_examples(stories, idx, config.negative_ratio, config.seed));
    }
    drafts.truncate(limit);

    let (_, validation, test) = split_sizes(drafts.len());
    let mut perm: Vec<usize> = (0..drafts.len()).collect();
    let mut split_rng = ChaCha8Rng::seed_from_u64(config.seed);
    split_rng.set_stream(u64::MAX);
    perm.shuffle(&mut split_rng);
    let mut splits = vec![CorpusSplit::Train; drafts.len()];
    for &i in &perm[..validation] {
        splits[i] = CorpusSplit::Validation;
    }
    for &i in &perm[validation..validation + test] {
        splits[i] = CorpusSplit::Test;
    }

    Ok(drafts
        .into_iter()
        .zip(splits)
        .map(|(d, split)| FinetuneExample {
            masked_text: d.masked_text,
            target: d.target.to_owned(),
            polarity: d.polarity,
            split,
            story_id: stories[d.story].id.clone(),
        })
        .collect())
}

pub fn write_corpus<W: Write>(mut w: W, examples: &[FinetuneExample]) -> Result<(), CorpusError> {
    for ex in examples {
        serde_json::to_writer(&mut w, ex).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn story(id: &str, texts: &[&str]) -> EventSequence {
        EventSequence::story(id, texts.iter().map(|t| Event::new(t).unwrap()).collect()).unwrap()
    }

    #[test]
    fn one_pair_story_with_donor() {
        let stories = [story("s", &["A.", "B."]), story("d", &["X.", "Y."])];
        let cfg = CorpusConfig { target_size: None, negative_ratio: 1.0, seed: 3 };
        let ex = build_finetune_corpus(&stories, &cfg).unwrap();
        let from_s: Vec<_> = ex.iter().filter(|e| e.story_id == "s").collect();
        let pos = from_s.iter().filter(|e| e.polarity == Polarity::Positive).count();
        let neg = from_s.iter().filter(|e| e.polarity == Polarity::Negative).count();
        assert_eq!((pos, neg), (2, 2));
        assert!(ex.iter().any(|e| e.masked_text == "A. <MASK> B." && e.target == "before"));
        assert!(ex.iter().any(|e| e.masked_text == "B. <MASK> A." && e.target == "after"));
        // negatives mix events from both stories
        for e in from_s.iter().filter(|e| e.polarity == Polarity::Negative) {
            assert_eq!(e.target, "[none]");
            assert!(e.masked_text.contains('X') || e.masked_text.contains('Y'));
        }
    }

    #[test]
    fn paper_scale_split_sizes() {
        assert_eq!(split_sizes(800_000), (784_000, 8_000, 8_000));
        assert_eq!(split_sizes(0), (0, 0, 0));
        assert_eq!(split_sizes(1), (1, 0, 0));
        assert_eq!(split_sizes(149), (147, 1, 1));
    }

    #[test]
    fn too_small_and_bad_ratio() {
        let one = [story("s", &["A.", "B."])];
        assert!(matches!(
            build_finetune_corpus(&one, &CorpusConfig::default()),
            Err(CorpusError::CorpusTooSmall(1))
        ));
        let two = [story("s", &["A.", "B."]), story("t", &["C.", "D."])];
        let cfg = CorpusConfig { negative_ratio: 0.0, ..Default::default() };
        assert!(matches!(build_finetune_corpus(&two, &cfg), Err(CorpusError::BadNegativeRatio(_))));
    }

    #[test]
    fn target_size_truncates() {
        let stories: Vec<_> = (0..10).map(|i| story(&i.to_string(), &["A a.", "B b.", "C c."])).collect();
        let cfg = CorpusConfig { target_size: Some(13), ..Default::default() };
        assert_eq!(build_finetune_corpus(&stories, &cfg).unwrap().len(), 13);
    }

    #[test]
    fn hyperparameter_defaults() {
        let h = FinetuneHyperparams::default();
        assert_eq!((h.learning_rate, h.batch_size, h.epochs), (1e-5, 256, 10));
        assert_eq!(h.added_special_tokens, vec!["[none]".to_owned()]);
    }
}
