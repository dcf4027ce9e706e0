//! Intervention generation: pick the verb and its arguments in the treatment
//! event, ask the infilling model to rewrite each span under a set of control
//! codes, then pool and filter the rewrites.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, InfillParams, LmClient, TextSpan};
use crate::covariate::{canonicalize, dedup_key};
use crate::event::Event;

#[derive(Debug, Error)]
pub enum InterventionError {
    #[error("no verb found in `{0}`")]
    NoVerbFound(String),
    #[error("every generated intervention was filtered out for `{0}`")]
    EmptyInterventionSet(String),
    #[error("unknown control code `{0}`")]
    UnknownControlCode(String),
    #[error("control code `{0}` does not produce counterfactual events")]
    ExcludedControlCode(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

/// Infilling control codes that yield counterfactual events. `restructure`
/// and `shuffle` keep the event's meaning and are rejected at parse time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", try_from = "String", into = "String")]
pub enum ControlCode {
    Resemantic,
    Negation,
    Lexical,
    Quantifier,
    Insert,
    Delete,
}

impl ControlCode {
    pub const ALL: [ControlCode; 6] = [
        ControlCode::Resemantic,
        ControlCode::Negation,
        ControlCode::Lexical,
        ControlCode::Quantifier,
        ControlCode::Insert,
        ControlCode::Delete,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ControlCode::Resemantic => "resemantic",
            ControlCode::Negation => "negation",
            ControlCode::Lexical => "lexical",
            ControlCode::Quantifier => "quantifier",
            ControlCode::Insert => "insert",
            ControlCode::Delete => "delete",
        }
    }
}

impl fmt::Display for ControlCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ControlCode {
    type Err = InterventionError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim().to_ascii_lowercase();
        if let Some(code) = ControlCode::ALL.into_iter().find(|c| c.as_str() == s) {
            return Ok(code);
        }
        match s.as_str() {
            "restructure" | "shuffle" => Err(InterventionError::ExcludedControlCode(s)),
            _ => Err(InterventionError::UnknownControlCode(s)),
        }
    }
}

impl TryFrom<String> for ControlCode {
    type Error = InterventionError;
    fn try_from(value: String) -> Result<Self, Self::Error> {
        value.parse()
    }
}

impl From<ControlCode> for String {
    fn from(c: ControlCode) -> String {
        c.as_str().to_owned()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpanMethod {
    RemoteSrl,
    Heuristic,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanSelection {
    pub verb: TextSpan,
    pub arg0: Option<TextSpan>,
    pub arg1: Option<TextSpan>,
    pub method: SpanMethod,
    /// Set when no verb was found and `verb` covers the whole sentence.
    pub fallback: bool,
}

impl SpanSelection {
    fn whole(text: &str, method: SpanMethod) -> Self {
        SpanSelection { verb: TextSpan::new(0, text.len()), arg0: None, arg1: None, method, fallback: true }
    }

    pub fn spans(&self) -> Vec<TextSpan> {
        let mut v: Vec<TextSpan> = [self.arg0, Some(self.verb), self.arg1].into_iter().flatten().collect();
        v.sort();
        v
    }
}

const STOPWORDS: &[&str] = &[
    "a",
    "an",
    "the",
    "this",
    "that",
    "these",
    "those",
    "i",
    "you",
    "he",
    "she",
    "it",
    "we",
    "they",
    "me",
    "him",
    "her",
    "us",
    "them",
    "my",
    "your",
    "his",
    "its",
    "our",
    "their",
    "to",
    "of",
    "in",
    "on",
    "at",
    "by",
    "for",
    "with",
    "from",
    "into",
    "onto",
    "about",
    "after",
    "before",
    "over",
    "under",
    "up",
    "down",
    "out",
    "and",
    "or",
    "but",
    "so",
    "if",
    "then",
    "because",
    "as",
    "not",
    "very",
    "too",
    "all",
    "some",
    "any",
    "no",
    "one",
    "two",
    "always",
    "never",
    "also",
    "just",
    "still",
    "really",
    "again",
    "yesterday",
    "today",
    "tomorrow",
    "there",
    "here",
    "news",
    "bus",
    "glass",
    "class",
];

const IRREGULAR_VERBS: &[&str] = &[
    "am",
    "is",
    "are",
    "was",
    "were",
    "be",
    "been",
    "has",
    "have",
    "had",
    "do",
    "does",
    "did",
    "felt",
    "went",
    "made",
    "ate",
    "got",
    "gave",
    "took",
    "saw",
    "came",
    "ran",
    "won",
    "lost",
    "bought",
    "brought",
    "thought",
    "told",
    "said",
    "found",
    "left",
    "kept",
    "knew",
    "met",
    "paid",
    "put",
    "read",
    "sat",
    "slept",
    "spent",
    "stood",
    "taught",
    "wrote",
    "drove",
    "fell",
    "forgot",
    "began",
    "broke",
    "caught",
    "chose",
    "drank",
    "flew",
    "grew",
    "heard",
    "held",
    "hid",
    "hit",
    "hurt",
    "let",
    "lay",
    "led",
    "rode",
    "rang",
    "rose",
    "sang",
    "sent",
    "set",
    "shot",
    "shut",
    "sold",
    "spoke",
    "stole",
    "swam",
    "threw",
    "understood",
    "woke",
    "wore",
    "became",
    "built",
    "can",
    "could",
    "will",
    "would",
    "should",
    "might",
    "must",
    "didn't",
    "wasn't",
    "couldn't",
    "decided",
    "wanted",
    "needed",
    "tried",
];

/// How strongly a word looks like a finite verb: 2 for known verbs and `-ed`
/// forms, 1 for third-person `-s` forms (which are often plural nouns).
/// Capitalized words are treated as names or sentence openers, never verbs.
fn verb_strength(word: &str) -> u8 {
    if !word.chars().next().is_some_and(char::is_lowercase) {
        return 0;
    }
    let word = word.to_lowercase();
    let word = word.as_str();
    if STOPWORDS.contains(&word) {
        return 0;
    }
    if IRREGULAR_VERBS.contains(&word) {
        return 2;
    }
    let n = word.chars().count();
    if n > 3 && word.ends_with("ed") {
        return 2;
    }
    let third_person =
        n > 3 && word.ends_with('s') && !["ss", "us", "is", "'s"].iter().any(|suffix| word.ends_with(suffix));
    third_person as u8
}

/// Whitespace tokens with the byte span of their word core (surrounding
/// punctuation removed) and whether the token ends a clause.
fn tokens(text: &str) -> Vec<(TextSpan, bool)> {
    let mut out = Vec::new();
    let mut pos = 0;
    for raw in text.split_whitespace() {
        let start = pos + text[pos..].find(raw).expect("token in text");
        pos = start + raw.len();
        let core = raw.trim_matches(|c: char| !c.is_alphanumeric() && c != '\'');
        let core = core.trim_start_matches('\'').trim_end_matches('\'');
        if core.is_empty() {
            continue;
        }
        let core_start = start + raw.find(core).expect("core inside token");
        let ends_clause = raw.trim_end().ends_with(['.', ',', ';', '!', '?', ':']);
        out.push((TextSpan::new(core_start, core_start + core.len()), ends_clause));
    }
    out
}

/// Rule-based verb/argument picker used when no SRL service is configured.
pub fn heuristic_spans(text: &str) -> Result<SpanSelection, InterventionError> {
    let toks = tokens(text);
    let strengths: Vec<u8> = toks.iter().map(|(span, _)| verb_strength(span.slice(text))).collect();
    let verb_at = [2, 1]
        .iter()
        .find_map(|&want| strengths.iter().position(|&s| s == want))
        .ok_or_else(|| InterventionError::NoVerbFound(text.to_owned()))?;

    let verb = toks[verb_at].0;
    let arg0 = (verb_at > 0).then(|| TextSpan::new(toks[0].0.start, toks[verb_at - 1].0.end));
    let arg1 = if toks[verb_at].1 {
        None
    } else {
        let mut end = None;
        for (span, stop) in &toks[verb_at + 1..] {
            end = Some(span.end);
            if *stop {
                break;
            }
        }
        end.map(|e| TextSpan::new(toks[verb_at + 1].0.start, e))
    };
    Ok(SpanSelection { verb, arg0, arg1, method: SpanMethod::Heuristic, fallback: false })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InterventionConfig {
    pub enabled: bool,
    pub codes: Vec<ControlCode>,
    pub cap: usize,
    pub temperature: f64,
    /// Generation length limit; enforced by the serving side, not sent.
    pub max_new_tokens: usize,
    /// Set from the engine-wide seed.
    #[serde(skip)]
    pub seed: u64,
    pub model: String,
    pub span_method: SpanMethod,
}

impl Default for InterventionConfig {
    fn default() -> Self {
        InterventionConfig {
            enabled: true,
            codes: ControlCode::ALL.to_vec(),
            cap: 50,
            temperature: 1.0,
            max_new_tokens: 40,
            seed: 0,
            model: "polyjuice".into(),
            span_method: SpanMethod::Heuristic,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InterventionSet {
    pub original: Event,
    pub interventions: Vec<Event>,
    pub control_codes_used: Vec<ControlCode>,
    pub selection: SpanSelection,
}

pub struct InterventionGenerator {
    client: LmClient,
    config: InterventionConfig,
}

impl InterventionGenerator {
    pub fn new(client: LmClient, config: InterventionConfig) -> Self {
        InterventionGenerator { client, config }
    }

    pub fn config(&self) -> &InterventionConfig {
        &self.config
    }

    /// Verb and argument spans. A sentence without a detectable verb falls
    /// back to a single whole-sentence span.
    pub fn select_spans(&self, event: &Event) -> Result<SpanSelection, InterventionError> {
        let text = event.text();
        match self.config.span_method {
            SpanMethod::Heuristic => match heuristic_spans(text) {
                Ok(sel) => Ok(sel),
                Err(InterventionError::NoVerbFound(_)) => {
                    Ok(SpanSelection::whole(text, SpanMethod::Heuristic))
                }
                Err(e) => Err(e),
            },
            SpanMethod::RemoteSrl => {
                let srl = self.client.srl(text)?;
                Ok(SpanSelection {
                    verb: srl.verb,
                    arg0: srl.arg0,
                    arg1: srl.arg1,
                    method: SpanMethod::RemoteSrl,
                    fallback: false,
                })
            }
        }
    }

    /// The infill requests issued for `event`, in issue order.
    pub fn plan(&self, event: &Event, selection: &SpanSelection) -> Vec<InfillParams> {
        let cfg = &self.config;
        let spans = selection.spans();
        let per_code = cfg.cap.div_ceil(cfg.codes.len().max(1));
        let per_request = per_code.div_ceil(spans.len()).max(1);
        let mut codes = cfg.codes.clone();
        codes.sort();
        codes.dedup();
        codes
            .iter()
            .flat_map(|&code| {
                spans.iter().map(move |&span| InfillParams {
                    text: event.text().to_owned(),
                    spans: vec![span],
                    control_code: code,
                    num_samples: per_request,
                    temperature: cfg.temperature,
                    seed: cfg.seed,
                })
            })
            .collect()
    }

    pub fn generate(&self, event: &Event) -> Result<InterventionSet, InterventionError> {
        let selection = self.select_spans(event)?;
        let plan = self.plan(event, &selection);
        let batches = plan
            .par_iter()
            .map(|p| self.client.infill(p, &self.config.model))
            .collect::<Result<Vec<_>, _>>()?;
        let original_key = dedup_key(event.text());
        let pooled = batches
            .into_iter()
            .flatten()
            .map(|t| t.split(['\n', '\r']).next().unwrap_or("").trim().to_owned())
            .filter(|t| dedup_key(t) != original_key);
        let mut interventions = canonicalize(pooled);
        interventions.truncate(self.config.cap);
        if interventions.is_empty() {
            return Err(InterventionError::EmptyInterventionSet(event.text().to_owned()));
        }
        let mut control_codes_used = self.config.codes.clone();
        control_codes_used.sort();
        control_codes_used.dedup();
        Ok(InterventionSet { original: event.clone(), interventions, control_codes_used, selection })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{ReplayBackend, ScoreCache};
    use serde_json::json;
    use std::sync::Arc;

    #[test]
    fn heuristic_running_example() {
        let text = "Emma felt hungry.";
        let sel = heuristic_spans(text).unwrap();
        assert_eq!(sel.verb.slice(text), "felt");
        assert_eq!(sel.arg0.unwrap().slice(text), "Emma");
        assert_eq!(sel.arg1.unwrap().slice(text), "hungry");
        assert!(!sel.fallback);
    }

    #[test]
    fn heuristic_more_sentences() {
        let text = "Tom went to the store, and bought milk.";
        let sel = heuristic_spans(text).unwrap();
        assert_eq!(sel.verb.slice(text), "went");
        assert_eq!(sel.arg1.unwrap().slice(text), "to the store");

        let text = "The kids played outside.";
        let sel = heuristic_spans(text).unwrap();
        assert_eq!(sel.verb.slice(text), "played");
        assert_eq!(sel.arg0.unwrap().slice(text), "The kids");

        let text = "James walks home";
        let sel = heuristic_spans(text).unwrap();
        assert_eq!(sel.verb.slice(text), "walks");
        assert_eq!(sel.arg1.unwrap().slice(text), "home");
    }

    #[test]
    fn no_verb_falls_back_to_whole_sentence() {
        assert!(matches!(heuristic_spans("Rain."), Err(InterventionError::NoVerbFound(_))));
        let gen = InterventionGenerator::new(
            LmClient::new(Arc::new(ReplayBackend::new(Arc::new(ScoreCache::in_memory())))),
            InterventionConfig::default(),
        );
        let sel = gen.select_spans(&Event::new("Rain.").unwrap()).unwrap();
        assert!(sel.fallback);
        assert_eq!(sel.verb, TextSpan::new(0, 5));
    }

    #[test]
    fn excluded_codes_do_not_parse() {
        assert!(matches!("shuffle".parse::<ControlCode>(), Err(InterventionError::ExcludedControlCode(_))));
        assert!(matches!(
            "restructure".parse::<ControlCode>(),
            Err(InterventionError::ExcludedControlCode(_))
        ));
        assert!(matches!("bogus".parse::<ControlCode>(), Err(InterventionError::UnknownControlCode(_))));
        assert_eq!("Negation".parse::<ControlCode>().unwrap(), ControlCode::Negation);
    }

    fn setup(config: InterventionConfig) -> (InterventionGenerator, Arc<ReplayBackend>) {
        let rb = Arc::new(ReplayBackend::new(Arc::new(ScoreCache::in_memory())));
        (InterventionGenerator::new(LmClient::new(rb.clone()), config), rb)
    }

    #[test]
    fn negation_yields_running_example() {
        let cfg = InterventionConfig { codes: vec![ControlCode::Negation], ..Default::default() };
        let (gen, rb) = setup(cfg);
        let e = Event::new("Emma felt hungry.").unwrap();
        let sel = gen.select_spans(&e).unwrap();
        for p in gen.plan(&e, &sel) {
            let texts = if p.spans[0].slice(e.text()) == "felt" {
                json!(["Emma didn't feel hungry.", "Emma felt hungry.", "Emma did not feel hungry."])
            } else {
                json!(["emma felt hungry.", "Nobody felt hungry."])
            };
            rb.insert(&LmClient::infill_request(&p, "polyjuice"), &json!({ "texts": texts })).unwrap();
        }
        let set = gen.generate(&e).unwrap();
        let texts: Vec<&str> = set.interventions.iter().map(Event::text).collect();
        assert_eq!(texts, ["Emma did not feel hungry.", "Emma didn't feel hungry.", "Nobody felt hungry."]);
        assert!(!set.interventions.contains(&e));
    }

    #[test]
    fn only_copies_is_an_error() {
        let cfg = InterventionConfig { codes: vec![ControlCode::Lexical], ..Default::default() };
        let (gen, rb) = setup(cfg);
        let e = Event::new("Emma felt hungry.").unwrap();
        let sel = gen.select_spans(&e).unwrap();
        for p in gen.plan(&e, &sel) {
            rb.insert(&LmClient::infill_request(&p, "polyjuice"), &json!({"texts": ["Emma felt hungry. "]}))
                .unwrap();
        }
        assert!(matches!(gen.generate(&e), Err(InterventionError::EmptyInterventionSet(_))));
    }

    #[test]
    fn cap_truncates_to_canonical_prefix() {
        let cfg = InterventionConfig { codes: vec![ControlCode::Insert], cap: 50, ..Default::default() };
        let (gen, rb) = setup(cfg);
        let e = Event::new("Emma felt hungry.").unwrap();
        let sel = gen.select_spans(&e).unwrap();
        let plan = gen.plan(&e, &sel);
        assert_eq!(plan.len(), 3);
        assert!(plan.iter().all(|p| p.num_samples == 17));
        let mut all = Vec::new();
        for (r, p) in plan.iter().enumerate() {
            let texts: Vec<String> =
                (0..40).map(|i| format!("Rewrite {:03} happened.", r * 40 + i)).collect();
            all.extend(texts.clone());
            rb.insert(&LmClient::infill_request(p, "polyjuice"), &json!({ "texts": texts })).unwrap();
        }
        assert_eq!(all.len(), 120);
        let set = gen.generate(&e).unwrap();
        all.sort();
        let got: Vec<String> = set.interventions.iter().map(|e| e.text().to_owned()).collect();
        assert_eq!(got, all[..50].to_vec());
    }

    #[test]
    fn remote_srl_spans_returned_verbatim() {
        let cfg = InterventionConfig { span_method: SpanMethod::RemoteSrl, ..Default::default() };
        let (gen, rb) = setup(cfg);
        rb.insert(
            &LmClient::srl_request("Emma felt hungry."),
            &json!({"verb": [5, 9], "arg0": [0, 4], "arg1": [10, 16]}),
        )
        .unwrap();
        let sel = gen.select_spans(&Event::new("Emma felt hungry.").unwrap()).unwrap();
        assert_eq!(sel.method, SpanMethod::RemoteSrl);
        assert_eq!(sel.spans(), vec![TextSpan::new(0, 4), TextSpan::new(5, 9), TextSpan::new(10, 16)]);
    }
}
