use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use super::{Backend, BackendError, BackendRequest, BackendResponse, Provenance};

static HTTP_REQUESTS: AtomicU64 = AtomicU64::new(0);

/// Number of HTTP requests attempted by any [`HttpBackend`] in this process.
pub fn http_requests_sent() -> u64 {
    HTTP_REQUESTS.load(Ordering::SeqCst)
}

/// Live backend: POSTs canonical bodies to `{base_url}/v1/{endpoint}`.
pub struct HttpBackend {
    base_url: String,
    client: reqwest::blocking::Client,
}

impl HttpBackend {
    pub fn new(base_url: impl Into<String>, timeout: Duration) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| BackendError::Unreachable(e.to_string()))?;
        Ok(HttpBackend { base_url: base_url.into().trim_end_matches('/').to_owned(), client })
    }

    pub fn base_url(&self) -> &str {
        &self.base_url
    }
}

impl Backend for HttpBackend {
    fn call(&self, request: &BackendRequest) -> Result<BackendResponse, BackendError> {
        HTTP_REQUESTS.fetch_add(1, Ordering::SeqCst);
        let url = format!("{}{}", self.base_url, request.endpoint.path());
        let body = super::canonical::canonical_bytes(&request.body);
        let resp = self
            .client
            .post(&url)
            .header("content-type", "application/json")
            .body(body)
            .send()
            .map_err(|e| BackendError::Unreachable(format!("{url}: {e}")))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| BackendError::Unreachable(format!("{url}: {e}")))?;
        if !status.is_success() {
            return Err(BackendError::Status { status: status.as_u16(), body: text });
        }
        let body = serde_json::from_str(&text)
            .map_err(|e| BackendError::Malformed { endpoint: request.endpoint, reason: e.to_string() })?;
        Ok(BackendResponse { body, provenance: Provenance::Live })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::Endpoint;
    use serde_json::json;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;

    #[test]
    fn unreachable_server_maps_to_unreachable() {
        // bind then drop to get a port nobody listens on
        let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
        let backend = HttpBackend::new(format!("http://127.0.0.1:{port}"), Duration::from_secs(2)).unwrap();
        let req = BackendRequest::new(Endpoint::ScoreTokens, json!({"text": "a", "model": "m"}));
        assert!(matches!(backend.call(&req), Err(BackendError::Unreachable(_))));
    }

    #[test]
    fn posts_canonical_body_to_endpoint_path() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let server = std::thread::spawn(move || {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut request_line = String::new();
            reader.read_line(&mut request_line).unwrap();
            let mut content_length = 0usize;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if line == "\r\n" {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    content_length = v.trim().parse().unwrap();
                }
            }
            let mut body = vec![0u8; content_length];
            reader.read_exact(&mut body).unwrap();
            let payload = r#"{"avg_token_loglik":-2.5}"#;
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 200 OK\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{}",
                payload.len(),
                payload
            )
            .unwrap();
            (request_line, String::from_utf8(body).unwrap())
        });
        let backend = HttpBackend::new(format!("http://{addr}/"), Duration::from_secs(5)).unwrap();
        let req = BackendRequest::new(Endpoint::PseudoLoglik, json!({"text": "hi", "model": "m"}));
        let resp = backend.call(&req).unwrap();
        assert_eq!(resp.body, json!({"avg_token_loglik": -2.5}));
        assert_eq!(resp.provenance, Provenance::Live);
        let (line, body) = server.join().unwrap();
        assert!(line.starts_with("POST /v1/pseudo_loglik "));
        assert_eq!(body, r#"{"model":"m","text":"hi"}"#);
    }
}
