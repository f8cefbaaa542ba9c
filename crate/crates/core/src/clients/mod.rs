//! Boundary to external model services: text generation, embedding and
//! pairwise relevance scoring.
//!
//! Every service sits behind a trait so that the deterministic mocks in
//! [`mock`] and the HTTP adapter in [`http`] are interchangeable.

pub mod http;
pub mod mock;
mod parallel;

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::vector::{EmbeddingVector, VectorError};

pub use parallel::{bounded_map, Semaphore};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClientError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("gave up after {attempts} attempts: {last}")]
    RetryExhausted { attempts: usize, last: String },
    #[error("backend refused request with status {status}: {body}")]
    BackendRefused { status: u16, body: String },
    #[error("empty input")]
    EmptyInput,
    #[error("invalid client configuration: {0}")]
    InvalidConfig(String),
    #[error("malformed backend response: {0}")]
    BadResponse(String),
    #[error(transparent)]
    Vector(#[from] VectorError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextGenRequest {
    pub prompt: String,
    pub max_output_chars: usize,
    pub temperature: f64,
}

impl TextGenRequest {
    pub const DEFAULT_MAX_OUTPUT_CHARS: usize = 4096;

    /// Request with the default output budget and temperature 0.
    pub fn new(prompt: impl Into<String>) -> Self {
        Self {
            prompt: prompt.into(),
            max_output_chars: Self::DEFAULT_MAX_OUTPUT_CHARS,
            temperature: 0.0,
        }
    }
}

pub trait TextGenerator: Send + Sync {
    fn generate(&self, request: &TextGenRequest) -> Result<String, ClientError>;
}

pub trait Embedder: Send + Sync {
    /// Output dimension.
    fn dim(&self) -> usize;

    /// One unit-norm vector per input text.
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, ClientError>;

    fn embed_one(&self, text: &str) -> Result<EmbeddingVector, ClientError> {
        self.embed(&[text.to_string()])?
            .pop()
            .ok_or_else(|| ClientError::BadResponse("no vector returned".into()))
    }
}

pub trait PairScorer: Send + Sync {
    /// Relevance of `document` to `query`; higher is more relevant, unbounded.
    fn score_pair(&self, query: &str, document: &str) -> Result<f64, ClientError>;
}

/// Shared by anything whose per-call closure should run with a request.
impl<F> TextGenerator for F
where
    F: Fn(&TextGenRequest) -> Result<String, ClientError> + Send + Sync,
{
    fn generate(&self, request: &TextGenRequest) -> Result<String, ClientError> {
        self(request)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    #[default]
    Mock,
    Http,
}

/// Configuration for one client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClientConfig {
    pub backend: Backend,
    pub endpoint: Option<String>,
    /// Name of the environment variable holding the bearer token.
    pub api_key_env: Option<String>,
    pub max_parallel: usize,
    pub max_retries: usize,
    pub timeout_ms: u64,
    pub backoff_base_ms: u64,
    /// Embedding dimension (the HTTP backend checks responses against it).
    pub dim: usize,
    /// Seed for mock backends.
    pub seed: u64,
}

impl Default for ClientConfig {
    fn default() -> Self {
        Self {
            backend: Backend::Mock,
            endpoint: None,
            api_key_env: None,
            max_parallel: 4,
            max_retries: 3,
            timeout_ms: 30_000,
            backoff_base_ms: 500,
            dim: mock::DEFAULT_DIM,
            seed: 0,
        }
    }
}

impl ClientConfig {
    pub fn validate(&self) -> Result<(), ClientError> {
        if self.max_parallel == 0 {
            return Err(ClientError::InvalidConfig("max_parallel must be at least 1".into()));
        }
        if self.dim == 0 {
            return Err(ClientError::InvalidConfig("dim must be positive".into()));
        }
        if self.backend == Backend::Http && self.endpoint.as_deref().unwrap_or("").is_empty() {
            return Err(ClientError::InvalidConfig("http backend requires an endpoint".into()));
        }
        Ok(())
    }
}

/// Per-role client configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ClientsConfig {
    pub generator: ClientConfig,
    pub judge: ClientConfig,
    pub embedder: ClientConfig,
    pub scorer: ClientConfig,
}

impl ClientsConfig {
    /// Same backend settings for every role.
    pub fn uniform(cfg: ClientConfig) -> Self {
        Self {
            generator: cfg.clone(),
            judge: cfg.clone(),
            embedder: cfg.clone(),
            scorer: cfg,
        }
    }
}

/// The set of services a pipeline run needs.
#[derive(Clone)]
pub struct Clients {
    pub generator: Arc<dyn TextGenerator>,
    pub judge: Arc<dyn TextGenerator>,
    pub embedder: Arc<dyn Embedder>,
    pub scorer: Arc<dyn PairScorer>,
    /// Upper bound on concurrent calls issued by pipeline stages.
    pub max_parallel: usize,
}

impl Clients {
    pub fn from_config(cfg: &ClientsConfig) -> Result<Self, ClientError> {
        for c in [&cfg.generator, &cfg.judge, &cfg.embedder, &cfg.scorer] {
            c.validate()?;
        }
        let embedder: Arc<dyn Embedder> = match cfg.embedder.backend {
            Backend::Mock => Arc::new(mock::MockEmbedder::new(cfg.embedder.dim, cfg.embedder.seed)),
            Backend::Http => Arc::new(http::HttpClient::new(cfg.embedder.clone())?),
        };
        let text = |c: &ClientConfig| -> Result<Arc<dyn TextGenerator>, ClientError> {
            Ok(match c.backend {
                Backend::Mock => Arc::new(mock::MockGenerator::new(c.seed, mock::MockEmbedder::new(c.dim, c.seed))),
                Backend::Http => Arc::new(http::HttpClient::new(c.clone())?),
            })
        };
        let scorer: Arc<dyn PairScorer> = match cfg.scorer.backend {
            Backend::Mock => Arc::new(mock::MockScorer::new(mock::MockEmbedder::new(
                cfg.scorer.dim,
                cfg.scorer.seed,
            ))),
            Backend::Http => Arc::new(http::HttpClient::new(cfg.scorer.clone())?),
        };
        Ok(Self {
            generator: text(&cfg.generator)?,
            judge: text(&cfg.judge)?,
            embedder,
            scorer,
            max_parallel: [&cfg.generator, &cfg.judge, &cfg.embedder, &cfg.scorer]
                .iter()
                .map(|c| c.max_parallel)
                .min()
                .unwrap_or(1),
        })
    }

    /// All-mock clients sharing one seed.
    pub fn mock(seed: u64) -> Self {
        let cfg = ClientConfig {
            seed,
            ..ClientConfig::default()
        };
        Self::from_config(&ClientsConfig::uniform(cfg)).expect("default mock config is valid")
    }

    pub fn with_generator(mut self, generator: Arc<dyn TextGenerator>) -> Self {
        self.generator = generator;
        self
    }

    pub fn with_judge(mut self, judge: Arc<dyn TextGenerator>) -> Self {
        self.judge = judge;
        self
    }

    pub fn with_embedder(mut self, embedder: Arc<dyn Embedder>) -> Self {
        self.embedder = embedder;
        self
    }

    pub fn with_scorer(mut self, scorer: Arc<dyn PairScorer>) -> Self {
        self.scorer = scorer;
        self
    }
}
