use std::time::Duration;

use async_trait::async_trait;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::http::{join_url, status_error, transport_error};
use super::BackendError;

/// One vector per input string, all of the same dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingResponse {
    pub vectors: Vec<Vec<f64>>,
}

impl EmbeddingResponse {
    pub fn dimension(&self) -> usize {
        self.vectors.first().map_or(0, Vec::len)
    }

    fn checked(self, inputs: usize) -> Result<Self, BackendError> {
        if self.vectors.len() != inputs {
            return Err(BackendError::MalformedResponse(format!(
                "{} vectors for {inputs} inputs",
                self.vectors.len()
            )));
        }
        let dim = self.dimension();
        if dim == 0 || self.vectors.iter().any(|v| v.len() != dim) {
            return Err(BackendError::MalformedResponse(
                "embedding dimensions disagree".into(),
            ));
        }
        Ok(self)
    }
}

#[async_trait]
pub trait Embedder: Send + Sync {
    /// Embeds each input (a token or a text) independently.
    async fn embed(&self, inputs: &[String]) -> Result<EmbeddingResponse, BackendError>;
}

/// Cosine similarity; zero when either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Deterministic embedder: each input string seeds a generator through its
/// SHA-256 digest, so equal strings always map to equal vectors. Components
/// are non-negative, which keeps cosine similarities in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MockEmbedder {
    dimension: usize,
    seed: u64,
}

impl Default for MockEmbedder {
    fn default() -> Self {
        Self::new(64, 0)
    }
}

impl MockEmbedder {
    pub fn new(dimension: usize, seed: u64) -> Self {
        Self {
            dimension: dimension.max(1),
            seed,
        }
    }

    pub fn vector(&self, input: &str) -> Vec<f64> {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(input.as_bytes());
        let digest: [u8; 32] = hasher.finalize().into();
        let mut rng = ChaCha8Rng::from_seed(digest);
        (0..self.dimension).map(|_| rng.random::<f64>()).collect()
    }
}

#[async_trait]
impl Embedder for MockEmbedder {
    async fn embed(&self, inputs: &[String]) -> Result<EmbeddingResponse, BackendError> {
        if inputs.is_empty() {
            return Err(BackendError::InvalidRequest("nothing to embed".into()));
        }
        Ok(EmbeddingResponse {
            vectors: inputs.iter().map(|i| self.vector(i)).collect(),
        })
    }
}

/// Client for the common open embeddings API: `POST {base}{path}` with
/// `{model, input: [...]}`, reading `data[i].embedding`.
#[derive(Debug, Clone)]
pub struct HttpEmbedder {
    client: reqwest::Client,
    url: String,
    model: String,
    auth: Option<(String, String)>,
    timeout: Duration,
}

#[derive(Debug, Deserialize)]
struct EmbeddingReply {
    data: Vec<EmbeddingItem>,
}

#[derive(Debug, Deserialize)]
struct EmbeddingItem {
    #[serde(default)]
    index: Option<usize>,
    embedding: Vec<f64>,
}

impl HttpEmbedder {
    pub fn new(
        base_url: &str,
        path: &str,
        model: impl Into<String>,
        timeout: Duration,
    ) -> Result<Self, BackendError> {
        let client = reqwest::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| BackendError::InvalidRequest(format!("http client: {e}")))?;
        Ok(Self {
            client,
            url: join_url(base_url, path),
            model: model.into(),
            auth: None,
            timeout,
        })
    }

    pub fn with_bearer(mut self, header: impl Into<String>, token: &str) -> Self {
        self.auth = Some((header.into(), format!("Bearer {token}")));
        self
    }
}

#[async_trait]
impl Embedder for HttpEmbedder {
    async fn embed(&self, inputs: &[String]) -> Result<EmbeddingResponse, BackendError> {
        if inputs.is_empty() {
            return Err(BackendError::InvalidRequest("nothing to embed".into()));
        }
        let mut builder = self
            .client
            .post(&self.url)
            .json(&serde_json::json!({"model": self.model, "input": inputs}));
        if let Some((name, value)) = &self.auth {
            builder = builder.header(name.as_str(), value.as_str());
        }
        let response = builder
            .send()
            .await
            .map_err(|e| transport_error(e, self.timeout))?;
        if !response.status().is_success() {
            return Err(status_error(response, self.timeout).await);
        }
        let bytes = response
            .bytes()
            .await
            .map_err(|e| transport_error(e, self.timeout))?;
        let mut reply: EmbeddingReply = serde_json::from_slice(&bytes)
            .map_err(|e| BackendError::MalformedResponse(e.to_string()))?;
        reply
            .data
            .sort_by_key(|item| item.index.unwrap_or(usize::MAX));
        EmbeddingResponse {
            vectors: reply.data.into_iter().map(|item| item.embedding).collect(),
        }
        .checked(inputs.len())
    }
}
