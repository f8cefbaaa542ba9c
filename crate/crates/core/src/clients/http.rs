//! Thin JSON-over-HTTP adapter.
//!
//! Requests are `POST`ed to the configured endpoint:
//!
//! | call        | request body                          | response body          |
//! |-------------|---------------------------------------|------------------------|
//! | generate    | `{"prompt", "max_output_chars", "temperature"}` | `{"text": ...}` |
//! | embed       | `{"texts": [...]}`                    | `{"vectors": [[...]]}` |
//! | score_pair  | `{"pair": [query, document]}`         | `{"score": ...}`       |
//!
//! A bearer token is read from the environment variable named by
//! `api_key_env` when set. 5xx and 429 responses are retried with exponential
//! backoff; any other non-2xx status fails immediately.

use std::time::Duration;

use rand::Rng;
use serde::Deserialize;
use serde_json::{json, Value};

use super::{ClientConfig, ClientError, Embedder, PairScorer, Semaphore, TextGenRequest, TextGenerator};
use crate::vector::{normalize, EmbeddingVector};

const BODY_EXCERPT: usize = 200;

/// Raw outcome of one attempt.
#[derive(Debug, Clone)]
pub struct TransportResponse {
    pub status: u16,
    pub body: String,
}

/// One HTTP POST. Separated out so tests can count in-flight calls.
pub trait Transport: Send + Sync {
    fn post(
        &self,
        url: &str,
        bearer: Option<&str>,
        body: &Value,
        timeout: Duration,
    ) -> Result<TransportResponse, ClientError>;
}

/// Blocking transport built on `ureq`.
pub struct UreqTransport {
    agent: ureq::Agent,
}

impl UreqTransport {
    pub fn new(timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self { agent }
    }
}

impl Transport for UreqTransport {
    fn post(
        &self,
        url: &str,
        bearer: Option<&str>,
        body: &Value,
        _timeout: Duration,
    ) -> Result<TransportResponse, ClientError> {
        let mut req = self.agent.post(url).header("Content-Type", "application/json");
        if let Some(token) = bearer {
            req = req.header("Authorization", &format!("Bearer {token}"));
        }
        let mut resp = req
            .send(body.to_string())
            .map_err(|e| ClientError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        let body = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| ClientError::Transport(e.to_string()))?;
        Ok(TransportResponse { status, body })
    }
}

pub struct HttpClient<T: Transport = UreqTransport> {
    cfg: ClientConfig,
    endpoint: String,
    transport: T,
    gate: Semaphore,
}

impl HttpClient<UreqTransport> {
    pub fn new(cfg: ClientConfig) -> Result<Self, ClientError> {
        let transport = UreqTransport::new(Duration::from_millis(cfg.timeout_ms));
        Self::with_transport(cfg, transport)
    }
}

fn excerpt(body: &str) -> String {
    body.chars().take(BODY_EXCERPT).collect()
}

fn retryable(status: u16) -> bool {
    status == 429 || (500..600).contains(&status)
}

impl<T: Transport> HttpClient<T> {
    pub fn with_transport(cfg: ClientConfig, transport: T) -> Result<Self, ClientError> {
        cfg.validate()?;
        let endpoint = cfg
            .endpoint
            .clone()
            .filter(|e| !e.is_empty())
            .ok_or_else(|| ClientError::InvalidConfig("http backend requires an endpoint".into()))?;
        let gate = Semaphore::new(cfg.max_parallel);
        Ok(Self {
            cfg,
            endpoint,
            transport,
            gate,
        })
    }

    pub fn transport(&self) -> &T {
        &self.transport
    }

    fn bearer(&self) -> Result<Option<String>, ClientError> {
        match &self.cfg.api_key_env {
            None => Ok(None),
            Some(var) => std::env::var(var)
                .map(Some)
                .map_err(|_| ClientError::InvalidConfig(format!("environment variable {var} is not set"))),
        }
    }

    fn backoff(&self, attempt: usize) -> Duration {
        let base = self.cfg.backoff_base_ms.saturating_mul(1 << attempt.min(16));
        let jitter = if self.cfg.backoff_base_ms > 0 {
            rand::rng().random_range(0..=self.cfg.backoff_base_ms / 2)
        } else {
            0
        };
        Duration::from_millis(base + jitter)
    }

    /// POST with retries; returns the parsed JSON body of the first 2xx.
    fn call(&self, body: &Value) -> Result<Value, ClientError> {
        let bearer = self.bearer()?;
        let timeout = Duration::from_millis(self.cfg.timeout_ms);
        let attempts = self.cfg.max_retries + 1;
        let mut last = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                std::thread::sleep(self.backoff(attempt - 1));
            }
            let outcome = {
                let _permit = self.gate.acquire();
                self.transport.post(&self.endpoint, bearer.as_deref(), body, timeout)
            };
            match outcome {
                Ok(resp) if (200..300).contains(&resp.status) => {
                    return serde_json::from_str(&resp.body)
                        .map_err(|e| ClientError::BadResponse(format!("{e}: {}", excerpt(&resp.body))));
                }
                Ok(resp) if retryable(resp.status) => {
                    last = format!("status {}: {}", resp.status, excerpt(&resp.body));
                }
                Ok(resp) => {
                    return Err(ClientError::BackendRefused {
                        status: resp.status,
                        body: excerpt(&resp.body),
                    });
                }
                Err(e) => last = e.to_string(),
            }
            log::debug!(
                "attempt {} of {attempts} to {} failed: {last}",
                attempt + 1,
                self.endpoint
            );
        }
        Err(ClientError::RetryExhausted { attempts, last })
    }
}

#[derive(Deserialize)]
struct TextReply {
    text: String,
}

#[derive(Deserialize)]
struct VectorsReply {
    vectors: Vec<Vec<f64>>,
}

#[derive(Deserialize)]
struct ScoreReply {
    score: f64,
}

fn decode<R: for<'de> Deserialize<'de>>(v: Value) -> Result<R, ClientError> {
    serde_json::from_value(v).map_err(|e| ClientError::BadResponse(e.to_string()))
}

impl<T: Transport> TextGenerator for HttpClient<T> {
    fn generate(&self, request: &TextGenRequest) -> Result<String, ClientError> {
        if request.prompt.is_empty() {
            return Err(ClientError::EmptyInput);
        }
        let body = json!({
            "prompt": request.prompt,
            "max_output_chars": request.max_output_chars,
            "temperature": request.temperature,
        });
        let reply: TextReply = decode(self.call(&body)?)?;
        Ok(reply.text.chars().take(request.max_output_chars).collect())
    }
}

impl<T: Transport> Embedder for HttpClient<T> {
    fn dim(&self) -> usize {
        self.cfg.dim
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, ClientError> {
        if texts.is_empty() || texts.iter().any(|t| t.is_empty()) {
            return Err(ClientError::EmptyInput);
        }
        let reply: VectorsReply = decode(self.call(&json!({ "texts": texts }))?)?;
        if reply.vectors.len() != texts.len() {
            return Err(ClientError::BadResponse(format!(
                "expected {} vectors, got {}",
                texts.len(),
                reply.vectors.len()
            )));
        }
        reply
            .vectors
            .into_iter()
            .map(|v| {
                if v.len() != self.cfg.dim {
                    return Err(ClientError::BadResponse(format!(
                        "expected dimension {}, got {}",
                        self.cfg.dim,
                        v.len()
                    )));
                }
                normalize(&v).map_err(ClientError::from)
            })
            .collect()
    }
}

impl<T: Transport> PairScorer for HttpClient<T> {
    fn score_pair(&self, query: &str, document: &str) -> Result<f64, ClientError> {
        if query.is_empty() || document.is_empty() {
            return Err(ClientError::EmptyInput);
        }
        let reply: ScoreReply = decode(self.call(&json!({ "pair": [query, document] }))?)?;
        if !reply.score.is_finite() {
            return Err(ClientError::BadResponse("non-finite score".into()));
        }
        Ok(reply.score)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Mutex;

    struct Scripted {
        replies: Mutex<Vec<TransportResponse>>,
        calls: AtomicUsize,
    }

    impl Scripted {
        fn new(mut replies: Vec<(u16, &str)>) -> Self {
            replies.reverse();
            Self {
                replies: Mutex::new(
                    replies
                        .into_iter()
                        .map(|(status, body)| TransportResponse {
                            status,
                            body: body.into(),
                        })
                        .collect(),
                ),
                calls: AtomicUsize::new(0),
            }
        }
    }

    impl Transport for Scripted {
        fn post(&self, _: &str, _: Option<&str>, _: &Value, _: Duration) -> Result<TransportResponse, ClientError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            self.replies
                .lock()
                .unwrap()
                .pop()
                .ok_or_else(|| ClientError::Transport("script exhausted".into()))
        }
    }

    fn cfg(retries: usize) -> ClientConfig {
        ClientConfig {
            backend: super::super::Backend::Http,
            endpoint: Some("http://unused".into()),
            max_retries: retries,
            backoff_base_ms: 0,
            dim: 2,
            ..ClientConfig::default()
        }
    }

    #[test]
    fn retries_server_errors_then_succeeds() {
        let t = Scripted::new(vec![(503, "busy"), (429, "slow"), (200, r#"{"text":"ok"}"#)]);
        let c = HttpClient::with_transport(cfg(3), t).unwrap();
        assert_eq!(c.generate(&TextGenRequest::new("p")).unwrap(), "ok");
        assert_eq!(c.transport().calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn exhausts_after_configured_attempts() {
        let t = Scripted::new(vec![(500, "x"); 5]);
        let c = HttpClient::with_transport(cfg(2), t).unwrap();
        let err = c.generate(&TextGenRequest::new("p")).unwrap_err();
        assert!(matches!(err, ClientError::RetryExhausted { attempts: 3, .. }));
        assert_eq!(c.transport().calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn client_errors_are_not_retried() {
        let long = "e".repeat(1000);
        let t = Scripted::new(vec![(400, long.as_str())]);
        let c = HttpClient::with_transport(cfg(3), t).unwrap();
        match c.score_pair("a", "b").unwrap_err() {
            ClientError::BackendRefused { status, body } => {
                assert_eq!(status, 400);
                assert_eq!(body.len(), BODY_EXCERPT);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(c.transport().calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn embed_checks_dimension() {
        let t = Scripted::new(vec![(200, r#"{"vectors":[[1.0,0.0,0.0]]}"#)]);
        let c = HttpClient::with_transport(cfg(0), t).unwrap();
        assert!(matches!(c.embed(&["a".into()]), Err(ClientError::BadResponse(_))));
        let t = Scripted::new(vec![(200, r#"{"vectors":[[3.0,4.0]]}"#)]);
        let c = HttpClient::with_transport(cfg(0), t).unwrap();
        let v = c.embed(&["a".into()]).unwrap();
        assert!((v[0][0] - 0.6).abs() < 1e-12);
    }

    #[test]
    fn missing_key_variable_is_a_config_error() {
        let mut c = cfg(0);
        c.api_key_env = Some("QBRAG_TEST_KEY_THAT_IS_NOT_SET".into());
        let client = HttpClient::with_transport(c, Scripted::new(vec![])).unwrap();
        assert!(matches!(
            client.generate(&TextGenRequest::new("p")),
            Err(ClientError::InvalidConfig(_))
        ));
    }
}
