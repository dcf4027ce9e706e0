use std::sync::Arc;

use serde_json::Value;

use super::canonical::canonical_bytes;
use super::{Backend, BackendError, BackendRequest, BackendResponse, Provenance, ScoreCache};

fn decode(request: &BackendRequest, bytes: &[u8]) -> Result<Value, BackendError> {
    serde_json::from_slice(bytes).map_err(|e| BackendError::Malformed {
        endpoint: request.endpoint,
        reason: format!("stored record: {e}"),
    })
}

/// Answers only from a fixture store. A miss is a hard error.
pub struct ReplayBackend {
    store: Arc<ScoreCache>,
}

impl ReplayBackend {
    pub fn new(store: Arc<ScoreCache>) -> Self {
        ReplayBackend { store }
    }

    pub fn store(&self) -> &Arc<ScoreCache> {
        &self.store
    }

    /// Register a fixture response for `request`.
    pub fn insert(&self, request: &BackendRequest, body: &Value) -> Result<(), BackendError> {
        self.store.put(&request.hash(), &canonical_bytes(body)).map(|_| ())
    }
}

impl Backend for ReplayBackend {
    fn call(&self, request: &BackendRequest) -> Result<BackendResponse, BackendError> {
        let hash = request.hash();
        match self.store.get(&hash)? {
            Some(bytes) => {
                Ok(BackendResponse { body: decode(request, &bytes)?, provenance: Provenance::Fixture })
            }
            None => Err(BackendError::FixtureMiss { endpoint: request.endpoint, hash }),
        }
    }
}

/// Read-through cache in front of another backend; misses are forwarded and
/// the response recorded.
pub struct RecordingBackend<B> {
    inner: B,
    store: Arc<ScoreCache>,
}

impl<B: Backend> RecordingBackend<B> {
    pub fn new(inner: B, store: Arc<ScoreCache>) -> Self {
        RecordingBackend { inner, store }
    }
}

impl<B: Backend> Backend for RecordingBackend<B> {
    fn call(&self, request: &BackendRequest) -> Result<BackendResponse, BackendError> {
        let hash = request.hash();
        if let Some(bytes) = self.store.get(&hash)? {
            return Ok(BackendResponse { body: decode(request, &bytes)?, provenance: Provenance::Cache });
        }
        let resp = self.inner.call(request)?;
        // store the canonical form so a replay decodes the identical value
        let bytes = canonical_bytes(&resp.body);
        self.store.put(&hash, &bytes)?;
        Ok(BackendResponse { body: decode(request, &bytes)?, provenance: resp.provenance })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{Endpoint, FnBackend};
    use serde_json::json;
    use std::sync::atomic::{AtomicUsize, Ordering};

    #[test]
    fn replay_hit_and_miss() {
        let replay = ReplayBackend::new(Arc::new(ScoreCache::in_memory()));
        let req = BackendRequest::new(Endpoint::PseudoLoglik, json!({"text": "x", "model": "m"}));
        assert!(matches!(replay.call(&req), Err(BackendError::FixtureMiss { .. })));
        replay.insert(&req, &json!({"avg_token_loglik": -2.5})).unwrap();
        let resp = replay.call(&req).unwrap();
        assert_eq!(resp.provenance, Provenance::Fixture);
        assert_eq!(resp.body["avg_token_loglik"], -2.5);
    }

    #[test]
    fn recording_calls_inner_once() {
        let calls = AtomicUsize::new(0);
        let inner = FnBackend(|_: &BackendRequest| {
            calls.fetch_add(1, Ordering::SeqCst);
            Ok(json!({"token_logprobs": [-1.0, -3.0]}))
        });
        let store = Arc::new(ScoreCache::in_memory());
        let rec = RecordingBackend::new(inner, store.clone());
        let req = BackendRequest::new(Endpoint::ScoreTokens, json!({"text": "x y", "model": "m"}));
        assert_eq!(rec.call(&req).unwrap().provenance, Provenance::Live);
        assert_eq!(rec.call(&req).unwrap().provenance, Provenance::Cache);
        assert_eq!(calls.load(Ordering::SeqCst), 1);
        let replay = ReplayBackend::new(store);
        assert_eq!(replay.call(&req).unwrap().body, json!({"token_logprobs": [-1.0, -3.0]}));
    }
}
