//! Sentence BLEU with add-epsilon smoothing, and self-BLEU over a text set.
//!
//! Tokens are whitespace-separated and compared case-sensitively. Modified
//! n-gram precision clips counts by the maximum count in any reference;
//! n-gram orders with zero matches get `0.1 / total` in place of zero. The
//! brevity penalty uses the reference length closest to the hypothesis
//! (shorter wins ties). A hypothesis sharing no unigram with any reference
//! scores exactly 0.

use std::collections::HashMap;

use thiserror::Error;

pub const SMOOTHING_EPSILON: f64 = 0.1;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BleuError {
    #[error("self-BLEU needs at least two texts, got {0}")]
    TooFewTexts(usize),
}

fn ngram_counts<'a>(tokens: &'a [&'a str], n: usize) -> HashMap<&'a [&'a str], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

pub fn sentence_bleu(hypothesis: &str, references: &[&str], max_ngram: usize) -> f64 {
    let hyp: Vec<&str> = hypothesis.split_whitespace().collect();
    let refs: Vec<Vec<&str>> = references.iter().map(|r| r.split_whitespace().collect()).collect();
    if hyp.is_empty() || refs.is_empty() || max_ngram == 0 {
        return 0.0;
    }

    let mut log_sum = 0.0;
    for n in 1..=max_ngram {
        let hyp_counts = ngram_counts(&hyp, n);
        let mut max_ref: HashMap<&[&str], usize> = HashMap::new();
        for r in &refs {
            for (g, c) in ngram_counts(r, n) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(c);
            }
        }
        let matched: usize =
            hyp_counts.iter().map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0))).sum();
        let total = hyp.len().saturating_sub(n - 1).max(1);
        if n == 1 && matched == 0 {
            return 0.0;
        }
        let p = if matched == 0 { SMOOTHING_EPSILON / total as f64 } else { matched as f64 / total as f64 };
        log_sum += p.ln() / max_ngram as f64;
    }

    let c = hyp.len();
    let r = refs.iter().map(Vec::len).min_by_key(|&len| (len.abs_diff(c), len)).unwrap_or(0);
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    bp * log_sum.exp()
}

/// Mean BLEU of each text scored against all the others.
pub fn self_bleu(texts: &[&str], max_ngram: usize) -> Result<f64, BleuError> {
    if texts.len() < 2 {
        return Err(BleuError::TooFewTexts(texts.len()));
    }
    let total: f64 = (0..texts.len())
        .map(|i| {
            let refs: Vec<&str> =
                texts.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, t)| *t).collect();
            sentence_bleu(texts[i], &refs, max_ngram)
        })
        .sum();
    Ok(total / texts.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_texts_score_one() {
        let t = ["she was tired after work", "she was tired after work", "she was tired after work"];
        assert!((self_bleu(&t, 4).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn disjoint_vocabulary_scores_zero() {
        let t = ["alpha beta gamma", "delta epsilon zeta", "eta theta iota"];
        assert_eq!(self_bleu(&t, 4).unwrap(), 0.0);
    }

    #[test]
    fn too_few_texts() {
        assert_eq!(self_bleu(&["one"], 4), Err(BleuError::TooFewTexts(1)));
    }

    #[test]
    fn short_hypothesis_brevity_penalty() {
        // hyp shorter than the only reference: BP = exp(1 - 4/2)
        let b = sentence_bleu("a b", &["a b c d"], 2);
        assert!((b - (1.0f64 - 2.0).exp()).abs() < 1e-12);
    }
}
