//! Language-model backend protocol.
//!
//! Every model interaction is a [`BackendRequest`]: an endpoint plus a JSON
//! body. Requests hash to a stable SHA-256 over their canonical encoding, so
//! responses can be cached on disk and replayed offline bit-for-bit.

mod cache;
pub mod canonical;
mod client;
mod http;
mod replay;
pub mod synthetic;

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

pub use cache::{CacheStats, ScoreCache};
pub use client::{GenerateParams, InfillParams, LmClient, SrlSpans, TextSpan, MASK_TOKEN};
pub use http::{http_requests_sent, HttpBackend};
pub use replay::{RecordingBackend, ReplayBackend};
pub use synthetic::SyntheticBackend;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Endpoint {
    FillMask,
    Generate,
    Infill,
    ScoreTokens,
    PseudoLoglik,
    Srl,
}

impl Endpoint {
    pub fn as_str(self) -> &'static str {
        match self {
            Endpoint::FillMask => "fill_mask",
            Endpoint::Generate => "generate",
            Endpoint::Infill => "infill",
            Endpoint::ScoreTokens => "score_tokens",
            Endpoint::PseudoLoglik => "pseudo_loglik",
            Endpoint::Srl => "srl",
        }
    }

    pub fn path(self) -> String {
        format!("/v1/{}", self.as_str())
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// SHA-256 of a request's canonical bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RequestHash(pub [u8; 32]);

impl RequestHash {
    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Display for RequestHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackendRequest {
    pub endpoint: Endpoint,
    /// The wire body, exactly as POSTed.
    pub body: Value,
}

impl BackendRequest {
    pub fn new(endpoint: Endpoint, body: Value) -> Self {
        BackendRequest { endpoint, body }
    }

    pub fn model_id(&self) -> Option<&str> {
        self.body.get("model").and_then(Value::as_str)
    }

    /// Canonical bytes of `{"body": ..., "endpoint": ...}`.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        canonical::canonical_bytes(&json!({
            "endpoint": self.endpoint.as_str(),
            "body": self.body,
        }))
    }

    pub fn hash(&self) -> RequestHash {
        RequestHash(canonical::sha256(&self.canonical_bytes()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Live,
    Cache,
    Fixture,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackendResponse {
    pub body: Value,
    pub provenance: Provenance,
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("template has no {MASK_TOKEN} marker")]
    NoMask,
    #[error("template has more than one {MASK_TOKEN} marker")]
    MultipleMasks,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("span {start}..{end} is outside text of length {len}")]
    SpanOutOfBounds { start: usize, end: usize, len: usize },
    #[error("spans overlap")]
    OverlappingSpans,
    #[error("backend unreachable: {0}")]
    Unreachable(String),
    #[error("backend returned HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("fixture miss for {endpoint} request {hash}")]
    FixtureMiss { endpoint: Endpoint, hash: RequestHash },
    #[error("malformed {endpoint} response: {reason}")]
    Malformed { endpoint: Endpoint, reason: String },
    #[error("cache already holds a different response for {0}")]
    CacheConflict(RequestHash),
    #[error("cache io: {0}")]
    CacheIo(#[from] std::io::Error),
}

pub trait Backend: Send + Sync {
    fn call(&self, request: &BackendRequest) -> Result<BackendResponse, BackendError>;
}

impl<B: Backend + ?Sized> Backend for Arc<B> {
    fn call(&self, request: &BackendRequest) -> Result<BackendResponse, BackendError> {
        (**self).call(request)
    }
}

impl<B: Backend + ?Sized> Backend for Box<B> {
    fn call(&self, request: &BackendRequest) -> Result<BackendResponse, BackendError> {
        (**self).call(request)
    }
}

/// Backend that answers from a closure; mostly for tests.
pub struct FnBackend<F>(pub F);

impl<F> Backend for FnBackend<F>
where
    F: Fn(&BackendRequest) -> Result<Value, BackendError> + Send + Sync,
{
    fn call(&self, request: &BackendRequest) -> Result<BackendResponse, BackendError> {
        (self.0)(request).map(|body| BackendResponse { body, provenance: Provenance::Live })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_depends_on_endpoint() {
        let body = json!({"text": "a", "model": "m"});
        let a = BackendRequest::new(Endpoint::ScoreTokens, body.clone());
        let b = BackendRequest::new(Endpoint::PseudoLoglik, body);
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().to_hex().len(), 64);
    }

    #[test]
    fn hash_is_pinned() {
        // Guards against accidental changes to the canonical encoding.
        let req = BackendRequest::new(
            Endpoint::FillMask,
            json!({"template": "A <MASK> B", "mask_token": "<MASK>", "candidates": ["before", "after", "[none]"], "model": "m"}),
        );
        assert_eq!(
            String::from_utf8(req.canonical_bytes()).unwrap(),
            r#"{"body":{"candidates":["before","after","[none]"],"mask_token":"<MASK>","model":"m","template":"A <MASK> B"},"endpoint":"fill_mask"}"#
        );
        assert_eq!(req.hash().to_hex(), "75d27086c811b163ae9bda3bc2b09fc686c38775e112ca3b6bb9732e4033beeb");
    }
}
