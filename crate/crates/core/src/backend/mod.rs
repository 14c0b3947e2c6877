//! Text-generation and embedding providers.
//!
//! Every provider implements [`TextGenerator`]; wrappers ([`CachedBackend`],
//! [`RetryingBackend`], [`RecordingBackend`]) compose over any other
//! provider. [`TextGenerator::generate_batch`] fans requests out with a
//! bounded number in flight and returns results aligned with the input.

mod cache;
mod config;
mod embed;
mod http;
mod mock;
mod replay;
mod retry;

use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::kind::DatasetKind;

pub use cache::CachedBackend;
pub use config::{build_generator, BackendConfig, BackendKind, ConfigError, EmbedderKind};
pub use embed::{cosine, Embedder, EmbeddingResponse, HttpEmbedder, MockEmbedder};
pub use http::HttpBackend;
pub use mock::{OracleBackend, ScriptedBackend};
pub use replay::{Fixture, RecordingBackend, ReplayBackend};
pub use retry::{RetryPolicy, RetryingBackend};

/// Default number of requests a batch keeps in flight.
pub const DEFAULT_CONCURRENCY: usize = 8;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decoding {
    /// Temperature zero; the most probable continuation at every step.
    #[default]
    Greedy,
}

/// What a prompt asks for. Remote backends ignore this; offline backends
/// use it to answer without parsing prompt text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PromptTask {
    Structure { kind: DatasetKind },
    Cell { question: String },
    FlatTable { kind: DatasetKind },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RequestHint {
    pub passage: Arc<str>,
    pub task: PromptTask,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub prompt: String,
    pub max_new_tokens: u32,
    #[serde(default)]
    pub decoding: Decoding,
    /// Not part of the request identity; never sent or digested.
    #[serde(skip)]
    pub hint: Option<RequestHint>,
}

impl GenerationRequest {
    pub fn new(prompt: impl Into<String>, max_new_tokens: u32) -> Self {
        Self {
            prompt: prompt.into(),
            max_new_tokens,
            decoding: Decoding::Greedy,
            hint: None,
        }
    }

    pub fn with_hint(mut self, passage: Arc<str>, task: PromptTask) -> Self {
        self.hint = Some(RequestHint { passage, task });
        self
    }

    /// Hex SHA-256 of the request identity (prompt, token limit, decoding).
    pub fn digest(&self) -> String {
        let identity = serde_json::json!({
            "prompt": self.prompt,
            "max_new_tokens": self.max_new_tokens,
            "decoding": self.decoding,
        });
        hex::encode(Sha256::digest(identity.to_string().as_bytes()))
    }

    pub fn check(&self) -> Result<(), BackendError> {
        if self.max_new_tokens == 0 {
            return Err(BackendError::InvalidRequest(
                "max_new_tokens must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationResponse {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub usage: Option<Usage>,
    #[serde(default)]
    pub latency_ms: u64,
}

impl GenerationResponse {
    pub fn text(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            usage: None,
            latency_ms: 0,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BackendError {
    #[error("request timed out after {after_ms} ms")]
    Timeout { after_ms: u64 },
    #[error("rate limited (retry after {retry_after:?})")]
    RateLimited { retry_after: Option<Duration> },
    #[error("backend unreachable: {0}")]
    Unreachable(String),
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("request rejected with status {status}: {body}")]
    Rejected { status: u16, body: String },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        matches!(
            self,
            BackendError::Timeout { .. }
                | BackendError::RateLimited { .. }
                | BackendError::Unreachable(_)
        )
    }
}

pub type BatchResult = Vec<Result<GenerationResponse, BackendError>>;

#[async_trait]
pub trait TextGenerator: Send + Sync {
    async fn generate(
        &self,
        request: &GenerationRequest,
    ) -> Result<GenerationResponse, BackendError>;

    /// Upper bound on requests in flight during [`generate_batch`](Self::generate_batch).
    fn max_in_flight(&self) -> usize {
        DEFAULT_CONCURRENCY
    }

    /// Position-aligned results. Fails as a whole only for an empty batch or
    /// when every request failed with the same `Unreachable` error.
    async fn generate_batch(
        &self,
        requests: &[GenerationRequest],
    ) -> Result<BatchResult, BackendError> {
        dispatch_batch(self, requests, self.max_in_flight()).await
    }
}

/// Runs `requests` through `generator` with at most `limit` in flight and
/// puts each result back at its request's index.
pub async fn dispatch_batch<G: TextGenerator + ?Sized>(
    generator: &G,
    requests: &[GenerationRequest],
    limit: usize,
) -> Result<BatchResult, BackendError> {
    if requests.is_empty() {
        return Err(BackendError::InvalidRequest("empty batch".into()));
    }
    let mut slots: Vec<Option<Result<GenerationResponse, BackendError>>> =
        (0..requests.len()).map(|_| None).collect();
    // Futures are lazy; buffer_unordered decides how many run at once.
    let pending: Vec<_> = requests
        .iter()
        .enumerate()
        .map(|(i, request)| indexed(generator, i, request))
        .collect();
    let mut completed = stream::iter(pending).buffer_unordered(limit.max(1));
    while let Some((i, result)) = completed.next().await {
        slots[i] = Some(result);
    }
    let results: BatchResult = slots
        .into_iter()
        .map(|slot| slot.expect("every dispatched request completes"))
        .collect();

    if let Some(Err(BackendError::Unreachable(first))) = results.first() {
        let all_same = results
            .iter()
            .all(|r| matches!(r, Err(BackendError::Unreachable(m)) if m == first));
        if all_same {
            return Err(BackendError::Unreachable(first.clone()));
        }
    }
    Ok(results)
}

async fn indexed<G: TextGenerator + ?Sized>(
    generator: &G,
    i: usize,
    request: &GenerationRequest,
) -> (usize, Result<GenerationResponse, BackendError>) {
    (i, generator.generate(request).await)
}

#[async_trait]
impl<T: TextGenerator + ?Sized> TextGenerator for Arc<T> {
    async fn generate(
        &self,
        request: &GenerationRequest,
    ) -> Result<GenerationResponse, BackendError> {
        (**self).generate(request).await
    }

    fn max_in_flight(&self) -> usize {
        (**self).max_in_flight()
    }

    async fn generate_batch(
        &self,
        requests: &[GenerationRequest],
    ) -> Result<BatchResult, BackendError> {
        (**self).generate_batch(requests).await
    }
}

#[async_trait]
impl<T: TextGenerator + ?Sized> TextGenerator for Box<T> {
    async fn generate(
        &self,
        request: &GenerationRequest,
    ) -> Result<GenerationResponse, BackendError> {
        (**self).generate(request).await
    }

    fn max_in_flight(&self) -> usize {
        (**self).max_in_flight()
    }

    async fn generate_batch(
        &self,
        requests: &[GenerationRequest],
    ) -> Result<BatchResult, BackendError> {
        (**self).generate_batch(requests).await
    }
}
