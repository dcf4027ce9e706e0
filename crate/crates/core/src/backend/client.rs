use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{Backend, BackendError, BackendRequest, BackendResponse, Endpoint};
use crate::intervention::ControlCode;

pub const MASK_TOKEN: &str = "<MASK>";

/// Half-open byte range into a text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(from = "[usize; 2]", into = "[usize; 2]")]
pub struct TextSpan {
    pub start: usize,
    pub end: usize,
}

impl TextSpan {
    pub fn new(start: usize, end: usize) -> Self {
        TextSpan { start, end }
    }

    pub fn slice<'a>(&self, text: &'a str) -> &'a str {
        &text[self.start..self.end]
    }
}

impl From<[usize; 2]> for TextSpan {
    fn from(v: [usize; 2]) -> Self {
        TextSpan { start: v[0], end: v[1] }
    }
}

impl From<TextSpan> for [usize; 2] {
    fn from(s: TextSpan) -> Self {
        [s.start, s.end]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerateParams {
    pub prompt: String,
    pub num_samples: usize,
    pub max_new_tokens: usize,
    pub temperature: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InfillParams {
    pub text: String,
    pub spans: Vec<TextSpan>,
    pub control_code: ControlCode,
    pub num_samples: usize,
    pub temperature: f64,
    pub seed: u64,
}

/// Semantic-role spans as returned by `/v1/srl`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SrlSpans {
    pub verb: TextSpan,
    pub arg0: Option<TextSpan>,
    pub arg1: Option<TextSpan>,
}

/// Typed wrapper over a [`Backend`] that validates arguments before a request
/// is built and validates response shapes after.
#[derive(Clone)]
pub struct LmClient {
    backend: Arc<dyn Backend>,
}

fn malformed(endpoint: Endpoint, reason: impl Into<String>) -> BackendError {
    BackendError::Malformed { endpoint, reason: reason.into() }
}

fn check_text(text: &str) -> Result<(), BackendError> {
    if text.trim().is_empty() {
        return Err(BackendError::InvalidArgument("text must be non-empty".into()));
    }
    Ok(())
}

fn string_list(endpoint: Endpoint, body: &Value, key: &str) -> Result<Vec<String>, BackendError> {
    body.get(key)
        .and_then(Value::as_array)
        .ok_or_else(|| malformed(endpoint, format!("missing `{key}` array")))?
        .iter()
        .map(|v| {
            v.as_str()
                .map(str::to_owned)
                .ok_or_else(|| malformed(endpoint, format!("non-string entry in `{key}`")))
        })
        .collect()
}

/// Cut a generation down to its first sentence: at the first line break, or
/// right after the first `.`, `!` or `?` that is followed by whitespace or
/// the end of text.
pub fn truncate_to_sentence(text: &str) -> String {
    let line = text.split(['\n', '\r']).next().unwrap_or("");
    let bytes = line.as_bytes();
    for (i, &b) in bytes.iter().enumerate() {
        if matches!(b, b'.' | b'!' | b'?') && bytes.get(i + 1).is_none_or(|c| c.is_ascii_whitespace()) {
            return line[..=i].trim().to_owned();
        }
    }
    line.trim().to_owned()
}

impl LmClient {
    pub fn new(backend: Arc<dyn Backend>) -> Self {
        LmClient { backend }
    }

    pub fn backend(&self) -> &Arc<dyn Backend> {
        &self.backend
    }

    pub fn call(&self, request: &BackendRequest) -> Result<BackendResponse, BackendError> {
        self.backend.call(request)
    }

    pub fn fill_mask_request(template: &str, candidates: &[&str], model: &str) -> BackendRequest {
        BackendRequest::new(
            Endpoint::FillMask,
            json!({
                "template": template,
                "mask_token": MASK_TOKEN,
                "candidates": candidates,
                "model": model,
            }),
        )
    }

    /// Full-vocabulary probability of each candidate at the mask position.
    pub fn fill_mask(
        &self,
        template: &str,
        candidates: &[&str],
        model: &str,
    ) -> Result<BTreeMap<String, f64>, BackendError> {
        match template.matches(MASK_TOKEN).count() {
            0 => return Err(BackendError::NoMask),
            1 => {}
            _ => return Err(BackendError::MultipleMasks),
        }
        if candidates.is_empty() {
            return Err(BackendError::InvalidArgument("no candidates".into()));
        }
        let ep = Endpoint::FillMask;
        let resp = self.call(&Self::fill_mask_request(template, candidates, model))?;
        let scores = resp
            .body
            .get("scores")
            .and_then(Value::as_object)
            .ok_or_else(|| malformed(ep, "missing `scores` object"))?;
        let mut out = BTreeMap::new();
        for &cand in candidates {
            let p = scores
                .get(cand)
                .and_then(Value::as_f64)
                .ok_or_else(|| malformed(ep, format!("no score for `{cand}`")))?;
            if !(0.0..=1.0).contains(&p) {
                return Err(malformed(ep, format!("score {p} for `{cand}` outside [0, 1]")));
            }
            out.insert(cand.to_owned(), p);
        }
        Ok(out)
    }

    pub fn generate_request(params: &GenerateParams, model: &str) -> BackendRequest {
        BackendRequest::new(
            Endpoint::Generate,
            json!({
                "prompt": params.prompt,
                "num_samples": params.num_samples,
                "max_new_tokens": params.max_new_tokens,
                "temperature": params.temperature,
                "seed": params.seed,
                "model": model,
            }),
        )
    }

    /// Sampled continuations, each cut to its first sentence.
    pub fn generate(&self, params: &GenerateParams, model: &str) -> Result<Vec<String>, BackendError> {
        if params.num_samples == 0 {
            return Err(BackendError::InvalidArgument("num_samples must be >= 1".into()));
        }
        if params.temperature.is_nan() || params.temperature <= 0.0 {
            return Err(BackendError::InvalidArgument("temperature must be > 0".into()));
        }
        let resp = self.call(&Self::generate_request(params, model))?;
        let texts = string_list(Endpoint::Generate, &resp.body, "texts")?;
        Ok(texts.iter().map(|t| truncate_to_sentence(t)).collect())
    }

    pub fn infill_request(params: &InfillParams, model: &str) -> BackendRequest {
        BackendRequest::new(
            Endpoint::Infill,
            json!({
                "text": params.text,
                "spans": params.spans,
                "control_code": params.control_code.as_str(),
                "num_samples": params.num_samples,
                "temperature": params.temperature,
                "seed": params.seed,
                "model": model,
            }),
        )
    }

    /// Candidate rewrites of `text` with the spans regenerated. Returned as-is,
    /// duplicates included.
    pub fn infill(&self, params: &InfillParams, model: &str) -> Result<Vec<String>, BackendError> {
        if params.spans.is_empty() {
            return Err(BackendError::InvalidArgument("at least one span required".into()));
        }
        let len = params.text.len();
        let mut sorted = params.spans.clone();
        sorted.sort();
        for s in &sorted {
            if s.start >= s.end
                || s.end > len
                || !params.text.is_char_boundary(s.start)
                || !params.text.is_char_boundary(s.end)
            {
                return Err(BackendError::SpanOutOfBounds { start: s.start, end: s.end, len });
            }
        }
        if sorted.windows(2).any(|w| w[0].end > w[1].start) {
            return Err(BackendError::OverlappingSpans);
        }
        if params.num_samples == 0 {
            return Err(BackendError::InvalidArgument("num_samples must be >= 1".into()));
        }
        let resp = self.call(&Self::infill_request(params, model))?;
        string_list(Endpoint::Infill, &resp.body, "texts")
    }

    pub fn score_tokens_request(text: &str, model: &str) -> BackendRequest {
        BackendRequest::new(Endpoint::ScoreTokens, json!({"text": text, "model": model}))
    }

    /// Per-token log-probabilities under a causal LM.
    pub fn score_tokens(&self, text: &str, model: &str) -> Result<Vec<f64>, BackendError> {
        check_text(text)?;
        let ep = Endpoint::ScoreTokens;
        let resp = self.call(&Self::score_tokens_request(text, model))?;
        let values = resp
            .body
            .get("token_logprobs")
            .and_then(Value::as_array)
            .ok_or_else(|| malformed(ep, "missing `token_logprobs`"))?;
        values
            .iter()
            .map(|v| match v.as_f64() {
                Some(lp) if lp <= 0.0 => Ok(lp),
                Some(lp) => Err(malformed(ep, format!("log-probability {lp} > 0"))),
                None => Err(malformed(ep, "non-numeric log-probability")),
            })
            .collect()
    }

    pub fn pseudo_loglik_request(text: &str, model: &str) -> BackendRequest {
        BackendRequest::new(Endpoint::PseudoLoglik, json!({"text": text, "model": model}))
    }

    /// Average per-token pseudo log-likelihood under a masked LM.
    pub fn pseudo_loglik(&self, text: &str, model: &str) -> Result<f64, BackendError> {
        check_text(text)?;
        let ep = Endpoint::PseudoLoglik;
        let resp = self.call(&Self::pseudo_loglik_request(text, model))?;
        match resp.body.get("avg_token_loglik").and_then(Value::as_f64) {
            Some(v) if v <= 0.0 => Ok(v),
            Some(v) => Err(malformed(ep, format!("average log-likelihood {v} > 0"))),
            None => Err(malformed(ep, "missing `avg_token_loglik`")),
        }
    }

    pub fn srl_request(text: &str) -> BackendRequest {
        BackendRequest::new(Endpoint::Srl, json!({"text": text}))
    }

    pub fn srl(&self, text: &str) -> Result<SrlSpans, BackendError> {
        check_text(text)?;
        let resp = self.call(&Self::srl_request(text))?;
        let spans: SrlSpans =
            serde_json::from_value(resp.body).map_err(|e| malformed(Endpoint::Srl, e.to_string()))?;
        for s in [Some(spans.verb), spans.arg0, spans.arg1].into_iter().flatten() {
            if s.start > s.end || s.end > text.len() {
                return Err(malformed(Endpoint::Srl, "span outside text"));
            }
        }
        Ok(spans)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{FnBackend, Provenance, ReplayBackend, ScoreCache};

    fn replay() -> (LmClient, Arc<ReplayBackend>) {
        let rb = Arc::new(ReplayBackend::new(Arc::new(ScoreCache::in_memory())));
        (LmClient::new(rb.clone()), rb)
    }

    const CANDS: [&str; 3] = ["before", "after", "[none]"];

    #[test]
    fn fill_mask_replays_fixture() {
        let (client, rb) = replay();
        let req = LmClient::fill_mask_request("A. <MASK> B.", &CANDS, "m");
        rb.insert(&req, &json!({"scores": {"before": 0.7, "after": 0.1, "[none]": 0.05}})).unwrap();
        assert_eq!(rb.call(&req).unwrap().provenance, Provenance::Fixture);
        let scores = client.fill_mask("A. <MASK> B.", &CANDS, "m").unwrap();
        assert_eq!(scores["before"], 0.7);
        assert_eq!(scores["after"], 0.1);
        assert_eq!(scores["[none]"], 0.05);
    }

    #[test]
    fn fill_mask_argument_errors() {
        let (client, _) = replay();
        assert!(matches!(client.fill_mask("A B", &CANDS, "m"), Err(BackendError::NoMask)));
        assert!(matches!(client.fill_mask("<MASK> <MASK>", &CANDS, "m"), Err(BackendError::MultipleMasks)));
        assert!(matches!(client.fill_mask("A <MASK>", &CANDS, "m"), Err(BackendError::FixtureMiss { .. })));
    }

    #[test]
    fn fill_mask_rejects_out_of_range() {
        let client = LmClient::new(Arc::new(FnBackend(|_: &BackendRequest| {
            Ok(json!({"scores": {"before": 1.2, "after": 0.1, "[none]": 0.0}}))
        })));
        assert!(matches!(client.fill_mask("a <MASK> b", &CANDS, "m"), Err(BackendError::Malformed { .. })));
    }

    #[test]
    fn generate_truncates_and_replays() {
        let (client, rb) = replay();
        let params = GenerateParams {
            prompt: "Emma made a steak. Before that,".into(),
            num_samples: 1,
            max_new_tokens: 15,
            temperature: 0.9,
            seed: 7,
        };
        rb.insert(&LmClient::generate_request(&params, "g"), &json!({"texts": ["She was tired."]})).unwrap();
        let a = client.generate(&params, "g").unwrap();
        assert_eq!(a, vec!["She was tired.".to_owned()]);
        assert_eq!(a, client.generate(&params, "g").unwrap());
        let other_seed = GenerateParams { seed: 8, ..params.clone() };
        assert!(matches!(client.generate(&other_seed, "g"), Err(BackendError::FixtureMiss { .. })));
        let bad = GenerateParams { temperature: 0.0, ..params };
        assert!(matches!(client.generate(&bad, "g"), Err(BackendError::InvalidArgument(_))));
    }

    #[test]
    fn sentence_truncation() {
        assert_eq!(truncate_to_sentence(" she was tired. Then she"), "she was tired.");
        assert_eq!(truncate_to_sentence("a 3.5 hour wait! ok"), "a 3.5 hour wait!");
        assert_eq!(truncate_to_sentence("no end"), "no end");
        assert_eq!(truncate_to_sentence("line one\nline two."), "line one");
        assert_eq!(truncate_to_sentence("what?"), "what?");
    }

    #[test]
    fn infill_validation() {
        let (client, _) = replay();
        let mut p = InfillParams {
            text: "Emma felt hungry.".into(),
            spans: vec![],
            control_code: ControlCode::Negation,
            num_samples: 4,
            temperature: 1.0,
            seed: 0,
        };
        assert!(matches!(client.infill(&p, "pj"), Err(BackendError::InvalidArgument(_))));
        p.spans = vec![TextSpan::new(5, 40)];
        assert!(matches!(client.infill(&p, "pj"), Err(BackendError::SpanOutOfBounds { .. })));
        p.spans = vec![TextSpan::new(0, 9), TextSpan::new(5, 16)];
        assert!(matches!(client.infill(&p, "pj"), Err(BackendError::OverlappingSpans)));
    }

    #[test]
    fn infill_keeps_duplicates() {
        let (client, rb) = replay();
        let p = InfillParams {
            text: "Emma felt hungry.".into(),
            spans: vec![TextSpan::new(5, 16)],
            control_code: ControlCode::Negation,
            num_samples: 3,
            temperature: 1.0,
            seed: 0,
        };
        let texts = json!({"texts": ["Emma didn't feel hungry.", "Emma didn't feel hungry.", "Emma was not hungry."]});
        rb.insert(&LmClient::infill_request(&p, "pj"), &texts).unwrap();
        let got = client.infill(&p, "pj").unwrap();
        assert_eq!(got.len(), 3);
        assert_eq!(got[0], "Emma didn't feel hungry.");
        let body = &LmClient::infill_request(&p, "pj").body;
        assert_eq!(body["spans"], json!([[5, 16]]));
        assert_eq!(body["control_code"], "negation");
    }

    #[test]
    fn score_tokens_and_pseudo_loglik() {
        let (client, rb) = replay();
        rb.insert(&LmClient::score_tokens_request("a b", "gpt2"), &json!({"token_logprobs": [-1.0, -3.0]}))
            .unwrap();
        assert_eq!(client.score_tokens("a b", "gpt2").unwrap(), vec![-1.0, -3.0]);
        assert!(matches!(client.score_tokens("", "gpt2"), Err(BackendError::InvalidArgument(_))));
        rb.insert(&LmClient::pseudo_loglik_request("x", "bert"), &json!({"avg_token_loglik": -2.5})).unwrap();
        assert_eq!(client.pseudo_loglik("x", "bert").unwrap(), -2.5);
        rb.insert(&LmClient::pseudo_loglik_request("y", "bert"), &json!({"avg_token_loglik": 0.0})).unwrap();
        assert_eq!(client.pseudo_loglik("y", "bert").unwrap(), 0.0);
        rb.insert(&LmClient::pseudo_loglik_request("z", "bert"), &json!({"avg_token_loglik": 0.5})).unwrap();
        assert!(client.pseudo_loglik("z", "bert").is_err());
    }

    #[test]
    fn srl_roundtrip() {
        let (client, rb) = replay();
        rb.insert(
            &LmClient::srl_request("Emma felt hungry."),
            &json!({"verb": [5, 9], "arg0": [0, 4], "arg1": null}),
        )
        .unwrap();
        let s = client.srl("Emma felt hungry.").unwrap();
        assert_eq!(s.verb, TextSpan::new(5, 9));
        assert_eq!(s.arg0, Some(TextSpan::new(0, 4)));
        assert_eq!(s.arg1, None);
    }
}
