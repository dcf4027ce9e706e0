//! Temporal relation scores from a masked LM.
//!
//! `"{A} <MASK> {B}"` is scored for the connectives `before`, `after` and
//! `[none]`. The directional score `f(A, B)` averages `before` in the forward
//! prompt with `after` in the reversed prompt.

mod corpus;

use std::collections::HashMap;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::backend::{BackendError, LmClient, MASK_TOKEN};
use crate::event::Event;

pub use corpus::{
    build_finetune_corpus, split_sizes, write_corpus, CorpusConfig, CorpusError, CorpusSplit,
    FinetuneExample, FinetuneHyperparams, Polarity,
};

pub const BEFORE: &str = "before";
pub const AFTER: &str = "after";
pub const NONE: &str = "[none]";
pub const CONNECTIVES: [&str; 3] = [BEFORE, AFTER, NONE];

/// Raw connective probabilities for one prompt direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemporalScore {
    pub before: f64,
    pub after: f64,
    pub none: f64,
    pub first: Event,
    pub second: Event,
}

/// A directional score plus whether it hit a zero denominator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreValue {
    pub value: f64,
    pub degenerate: bool,
}

impl ScoreValue {
    fn plain(value: f64) -> Self {
        ScoreValue { value, degenerate: false }
    }
}

pub fn prompt(first: &Event, second: &Event) -> String {
    format!("{} {MASK_TOKEN} {}", first.text(), second.text())
}

/// `f(X, Y) = (f_b(X, Y) + f_a(Y, X)) / 2`.
pub fn bidirectional(before_xy: f64, after_yx: f64) -> f64 {
    0.5 * (before_xy + after_yx)
}

/// Before/after-only score:
/// `(f_b(X,Y) + f_a(Y,X)) / (f_b(X,Y) + f_a(X,Y) + f_b(Y,X) + f_a(Y,X))`.
/// A zero denominator yields 0.5 and is flagged.
pub fn simplified(before_xy: f64, after_xy: f64, before_yx: f64, after_yx: f64) -> ScoreValue {
    let denom = before_xy + after_xy + before_yx + after_yx;
    if denom > 0.0 {
        ScoreValue::plain((before_xy + after_yx) / denom)
    } else {
        ScoreValue { value: 0.5, degenerate: true }
    }
}

/// Scores event pairs through a fill-mask backend. Raw scores are memoized
/// per ordered pair.
pub struct TemporalPredictor {
    client: LmClient,
    model: String,
    memo: Mutex<HashMap<(Event, Event), TemporalScore>>,
}

impl TemporalPredictor {
    pub fn new(client: LmClient, model: impl Into<String>) -> Self {
        TemporalPredictor { client, model: model.into(), memo: Mutex::new(HashMap::new()) }
    }

    pub fn model(&self) -> &str {
        &self.model
    }

    pub fn raw_scores(&self, first: &Event, second: &Event) -> Result<TemporalScore, BackendError> {
        let key = (first.clone(), second.clone());
        if let Some(hit) = self.memo.lock().unwrap().get(&key) {
            return Ok(hit.clone());
        }
        let scores = self.client.fill_mask(&prompt(first, second), &CONNECTIVES, &self.model)?;
        let score = TemporalScore {
            before: scores[BEFORE],
            after: scores[AFTER],
            none: scores[NONE],
            first: first.clone(),
            second: second.clone(),
        };
        self.memo.lock().unwrap().insert(key, score.clone());
        Ok(score)
    }

    /// Probability-like score that `first` happens before `second`.
    pub fn f(&self, first: &Event, second: &Event) -> Result<f64, BackendError> {
        let fwd = self.raw_scores(first, second)?;
        let rev = self.raw_scores(second, first)?;
        Ok(bidirectional(fwd.before, rev.after))
    }

    pub fn simplify(&self, first: &Event, second: &Event) -> Result<ScoreValue, BackendError> {
        let fwd = self.raw_scores(first, second)?;
        let rev = self.raw_scores(second, first)?;
        Ok(simplified(fwd.before, fwd.after, rev.before, rev.after))
    }

    /// `f` or its simplified form.
    pub fn score(&self, first: &Event, second: &Event, simplify: bool) -> Result<ScoreValue, BackendError> {
        if simplify {
            self.simplify(first, second)
        } else {
            self.f(first, second).map(ScoreValue::plain)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{ReplayBackend, ScoreCache};
    use proptest::prelude::*;
    use serde_json::json;
    use std::sync::Arc;

    fn ev(s: &str) -> Event {
        Event::new(s).unwrap()
    }

    fn predictor(fixtures: &[(&str, &str, [f64; 3])]) -> TemporalPredictor {
        let rb = Arc::new(ReplayBackend::new(Arc::new(ScoreCache::in_memory())));
        for (a, b, [bf, af, nn]) in fixtures {
            let req = LmClient::fill_mask_request(&prompt(&ev(a), &ev(b)), &CONNECTIVES, "tp");
            rb.insert(&req, &json!({"scores": {"before": bf, "after": af, "[none]": nn}})).unwrap();
        }
        TemporalPredictor::new(LmClient::new(rb), "tp")
    }

    #[test]
    fn raw_scores_from_fixture() {
        let p = predictor(&[("A.", "B.", [0.7, 0.1, 0.05])]);
        let s = p.raw_scores(&ev("A."), &ev("B.")).unwrap();
        assert_eq!((s.before, s.after, s.none), (0.7, 0.1, 0.05));
        // reversed prompt is a different request
        assert!(matches!(p.raw_scores(&ev("B."), &ev("A.")), Err(BackendError::FixtureMiss { .. })));
        let fwd = LmClient::fill_mask_request(&prompt(&ev("A."), &ev("B.")), &CONNECTIVES, "tp");
        let rev = LmClient::fill_mask_request(&prompt(&ev("B."), &ev("A.")), &CONNECTIVES, "tp");
        assert_ne!(fwd.hash(), rev.hash());
    }

    #[test]
    fn f_averages_both_directions() {
        let p = predictor(&[("A.", "B.", [0.7, 0.2, 0.1]), ("B.", "A.", [0.3, 0.5, 0.1])]);
        assert!((p.f(&ev("A."), &ev("B.")).unwrap() - 0.6).abs() < 1e-12);
        assert_eq!(bidirectional(0.42, 0.42), 0.42);
        assert_eq!(bidirectional(1.0, 0.0), 0.5);
    }

    #[test]
    fn simplify_examples() {
        // f_b(X,A)=0.3, f_a(A,X)=0.3, f_a(X,A)=0.2, f_b(A,X)=0.2
        let v = simplified(0.3, 0.2, 0.2, 0.3);
        assert!((v.value - 0.6).abs() < 1e-12 && !v.degenerate);
        assert_eq!(simplified(0.25, 0.25, 0.25, 0.25).value, 0.5);
        assert_eq!(simplified(0.0, 0.4, 0.3, 0.0).value, 0.0);
        let z = simplified(0.0, 0.0, 0.0, 0.0);
        assert!(z.degenerate && z.value == 0.5);

        let p = predictor(&[("X.", "A.", [0.3, 0.2, 0.0]), ("A.", "X.", [0.2, 0.3, 0.0])]);
        assert!((p.simplify(&ev("X."), &ev("A.")).unwrap().value - 0.6).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn simplify_is_antisymmetric(a in 0.0f64..1.0, b in 0.0f64..1.0, c in 0.0f64..1.0, d in 1e-9f64..1.0) {
            let xy = simplified(a, b, c, d).value;
            let yx = simplified(c, d, a, b).value;
            prop_assert!((xy + yx - 1.0).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&xy));
        }

        #[test]
        fn f_is_bounded(a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
            prop_assert!((0.0..=1.0).contains(&bidirectional(a, b)));
        }
    }
}
