//! A deterministic stand-in language model.
//!
//! Every response is a pure function of the request's canonical bytes, so it
//! behaves identically on every platform. Scores carry no linguistic meaning;
//! the backend exists to exercise the full pipeline offline and to record
//! fixture stores without a model server.

use serde_json::{json, Value};

use super::{Backend, BackendError, BackendRequest, BackendResponse, Endpoint, Provenance, MASK_TOKEN};
use crate::intervention::heuristic_spans;

const SUBJECTS: [&str; 8] = ["She", "He", "They", "Emma", "Tom", "Her friend", "The family", "Jake"];
const PREDICATES: [&str; 12] = [
    "felt hungry",
    "was tired",
    "went to the store",
    "woke up early",
    "called a friend",
    "forgot the keys",
    "saw a movie",
    "lost the game",
    "found some money",
    "cooked dinner",
    "got a new job",
    "missed the bus",
];
const FILLERS: [&str; 10] = [
    "never",
    "wanted to",
    "barely",
    "happily",
    "quickly",
    "did not",
    "almost",
    "really",
    "nearly",
    "suddenly",
];

#[derive(Debug, Default, Clone, Copy)]
pub struct SyntheticBackend;

struct Draws {
    seed: [u8; 32],
    counter: u64,
}

impl Draws {
    fn new(request: &BackendRequest, salt: &str) -> Self {
        let mut bytes = request.canonical_bytes();
        bytes.extend_from_slice(salt.as_bytes());
        Draws { seed: super::canonical::sha256(&bytes), counter: 0 }
    }

    fn next_u64(&mut self) -> u64 {
        let mut buf = self.seed.to_vec();
        buf.extend_from_slice(&self.counter.to_le_bytes());
        self.counter += 1;
        let h = super::canonical::sha256(&buf);
        u64::from_le_bytes(h[..8].try_into().unwrap())
    }

    /// Uniform in [0, 1).
    fn unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    fn pick<'a>(&mut self, items: &[&'a str]) -> &'a str {
        items[(self.next_u64() % items.len() as u64) as usize]
    }
}

fn field<'a>(request: &'a BackendRequest, key: &str) -> Result<&'a Value, BackendError> {
    request
        .body
        .get(key)
        .ok_or_else(|| BackendError::Status { status: 400, body: format!("missing `{key}`") })
}

fn count(request: &BackendRequest) -> Result<usize, BackendError> {
    Ok(field(request, "num_samples")?.as_u64().unwrap_or(1) as usize)
}

impl SyntheticBackend {
    fn fill_mask(&self, request: &BackendRequest) -> Result<Value, BackendError> {
        let template = field(request, "template")?.as_str().unwrap_or_default();
        match template.matches(MASK_TOKEN).count() {
            1 => {}
            0 => return Err(BackendError::NoMask),
            _ => return Err(BackendError::MultipleMasks),
        }
        let candidates = field(request, "candidates")?.as_array().cloned().unwrap_or_default();
        let mut draws = Draws::new(request, "fill_mask");
        let raw: Vec<f64> = candidates.iter().map(|_| 0.05 + draws.unit()).collect();
        let total: f64 = raw.iter().sum::<f64>() / 0.9;
        let scores: serde_json::Map<String, Value> = candidates
            .iter()
            .zip(raw)
            .map(|(c, r)| (c.as_str().unwrap_or_default().to_owned(), json!(r / total)))
            .collect();
        Ok(json!({ "scores": scores }))
    }

    fn generate(&self, request: &BackendRequest) -> Result<Value, BackendError> {
        let n = count(request)?;
        let mut draws = Draws::new(request, "generate");
        let texts: Vec<String> = (0..n)
            .map(|_| format!(" {} {}. And then", draws.pick(&SUBJECTS), draws.pick(&PREDICATES)))
            .collect();
        Ok(json!({ "texts": texts }))
    }

    fn infill(&self, request: &BackendRequest) -> Result<Value, BackendError> {
        let text = field(request, "text")?.as_str().unwrap_or_default().to_owned();
        let spans: Vec<[usize; 2]> =
            serde_json::from_value(field(request, "spans")?.clone()).unwrap_or_default();
        let n = count(request)?;
        let mut draws = Draws::new(request, "infill");
        let mut texts = Vec::with_capacity(n);
        for _ in 0..n {
            let mut out = String::new();
            let mut pos = 0;
            for &[s, e] in &spans {
                if s < pos || e > text.len() || !text.is_char_boundary(s) || !text.is_char_boundary(e) {
                    continue;
                }
                out.push_str(&text[pos..s]);
                out.push_str(draws.pick(&FILLERS));
                out.push(' ');
                out.push_str(&text[s..e]);
                pos = e;
            }
            out.push_str(&text[pos..]);
            texts.push(out);
        }
        Ok(json!({ "texts": texts }))
    }

    fn token_logprobs(request: &BackendRequest, salt: &str) -> Result<Vec<f64>, BackendError> {
        let text = field(request, "text")?.as_str().unwrap_or_default();
        let mut draws = Draws::new(request, salt);
        Ok(text.split_whitespace().map(|_| -(0.25 + 6.0 * draws.unit())).collect())
    }
}

impl Backend for SyntheticBackend {
    fn call(&self, request: &BackendRequest) -> Result<BackendResponse, BackendError> {
        let body = match request.endpoint {
            Endpoint::FillMask => self.fill_mask(request)?,
            Endpoint::Generate => self.generate(request)?,
            Endpoint::Infill => self.infill(request)?,
            Endpoint::ScoreTokens => {
                json!({ "token_logprobs": Self::token_logprobs(request, "clm")? })
            }
            Endpoint::PseudoLoglik => {
                let lps = Self::token_logprobs(request, "mlm")?;
                let avg = if lps.is_empty() { 0.0 } else { lps.iter().sum::<f64>() / lps.len() as f64 };
                json!({ "avg_token_loglik": avg })
            }
            Endpoint::Srl => {
                let text = field(request, "text")?.as_str().unwrap_or_default();
                match heuristic_spans(text) {
                    Ok(sel) => json!({ "verb": sel.verb, "arg0": sel.arg0, "arg1": sel.arg1 }),
                    Err(_) => json!({ "verb": [0, text.len()], "arg0": null, "arg1": null }),
                }
            }
        };
        Ok(BackendResponse { body, provenance: Provenance::Live })
    }
}
