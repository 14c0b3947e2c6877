use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{
    BackendError, CachedBackend, Embedder, HttpBackend, HttpEmbedder, MockEmbedder, OracleBackend,
    ReplayBackend, RetryPolicy, RetryingBackend, TextGenerator, DEFAULT_CONCURRENCY,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    Http,
    #[default]
    MockOracle,
    Replay,
}

impl std::str::FromStr for BackendKind {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "http" => Ok(BackendKind::Http),
            "mock-oracle" => Ok(BackendKind::MockOracle),
            "replay" => Ok(BackendKind::Replay),
            other => Err(ConfigError::Invalid(format!(
                "unknown backend {other:?} (expected http, mock-oracle or replay)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbedderKind {
    #[default]
    Mock,
    Http,
}

/// Backend settings as read from the `[backend]` table of a config file.
/// The API key itself is only ever read from the environment variable named
/// by `api_key_env`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub base_url: String,
    pub completion_path: String,
    pub model: String,
    /// Empty string disables authentication.
    pub api_key_env: String,
    pub auth_header: String,
    pub timeout_ms: u64,
    /// Total attempts per request, first try included.
    pub retry_cap: u32,
    pub retry_base_ms: u64,
    pub concurrency: usize,
    pub cache: bool,
    pub fixture_dir: Option<PathBuf>,
    pub max_new_tokens: u32,
    /// Prompt budget used to truncate passages; unset means no truncation.
    pub context_tokens: Option<usize>,
    pub embedder: EmbedderKind,
    pub embedding_path: String,
    pub embedding_model: String,
    pub embedding_dim: usize,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::MockOracle,
            base_url: "http://localhost:8000".into(),
            completion_path: "/v1/completions".into(),
            model: "google/flan-t5-xl".into(),
            api_key_env: "TEXT2TABLE_API_KEY".into(),
            auth_header: "Authorization".into(),
            timeout_ms: 60_000,
            retry_cap: 4,
            retry_base_ms: 500,
            concurrency: DEFAULT_CONCURRENCY,
            cache: true,
            fixture_dir: None,
            max_new_tokens: 64,
            context_tokens: Some(2048),
            embedder: EmbedderKind::Mock,
            embedding_path: "/v1/embeddings".into(),
            embedding_model: String::new(),
            embedding_dim: 64,
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("environment variable {0} is not set (it must hold the API key)")]
    MissingEnv(String),
    #[error("replay backend needs fixture_dir")]
    MissingFixtureDir,
    #[error("mock-oracle backend needs gold tables")]
    OracleNeedsGold,
    #[error("{0}")]
    Invalid(String),
    #[error("cannot open fixtures at {path}: {source}")]
    Fixtures {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Backend(#[from] BackendError),
}

impl BackendConfig {
    pub fn timeout(&self) -> Duration {
        Duration::from_millis(self.timeout_ms)
    }

    pub fn retry_policy(&self) -> RetryPolicy {
        RetryPolicy {
            max_attempts: self.retry_cap.max(1),
            base_delay: Duration::from_millis(self.retry_base_ms),
            ..RetryPolicy::default()
        }
    }

    pub fn check(&self) -> Result<(), ConfigError> {
        if self.concurrency == 0 {
            return Err(ConfigError::Invalid(
                "concurrency must be at least 1".into(),
            ));
        }
        if self.max_new_tokens == 0 {
            return Err(ConfigError::Invalid(
                "max_new_tokens must be at least 1".into(),
            ));
        }
        Ok(())
    }

    /// Resolves the API key from the environment through `env`.
    pub fn api_key(
        &self,
        env: impl Fn(&str) -> Option<String>,
    ) -> Result<Option<String>, ConfigError> {
        if self.api_key_env.is_empty() {
            return Ok(None);
        }
        match env(&self.api_key_env) {
            Some(key) if !key.is_empty() => Ok(Some(key)),
            _ => Err(ConfigError::MissingEnv(self.api_key_env.clone())),
        }
    }

    /// The remote completion client with retries, without the cache layer.
    pub fn http_backend(
        &self,
        env: impl Fn(&str) -> Option<String>,
    ) -> Result<RetryingBackend<HttpBackend>, ConfigError> {
        let mut http = HttpBackend::new(
            &self.base_url,
            &self.completion_path,
            &self.model,
            self.timeout(),
        )?
        .with_concurrency(self.concurrency);
        if let Some(key) = self.api_key(env)? {
            http = http.with_bearer(&self.auth_header, &key);
        }
        Ok(RetryingBackend::new(http, self.retry_policy()))
    }

    pub fn embedder(
        &self,
        env: impl Fn(&str) -> Option<String>,
    ) -> Result<Arc<dyn Embedder>, ConfigError> {
        match self.embedder {
            EmbedderKind::Mock => Ok(Arc::new(MockEmbedder::new(self.embedding_dim, 0))),
            EmbedderKind::Http => {
                let mut http = HttpEmbedder::new(
                    &self.base_url,
                    &self.embedding_path,
                    &self.embedding_model,
                    self.timeout(),
                )?;
                if let Some(key) = self.api_key(env)? {
                    http = http.with_bearer(&self.auth_header, &key);
                }
                Ok(Arc::new(http))
            }
        }
    }
}

/// Builds the configured generator. `oracle` supplies gold tables for the
/// mock-oracle kind; `env` resolves environment variables.
pub fn build_generator(
    config: &BackendConfig,
    oracle: Option<OracleBackend>,
    env: impl Fn(&str) -> Option<String>,
) -> Result<Arc<dyn TextGenerator>, ConfigError> {
    config.check()?;
    let base: Arc<dyn TextGenerator> = match config.kind {
        BackendKind::Http => Arc::new(config.http_backend(env)?),
        BackendKind::MockOracle => Arc::new(oracle.ok_or(ConfigError::OracleNeedsGold)?),
        BackendKind::Replay => {
            let dir = config
                .fixture_dir
                .clone()
                .ok_or(ConfigError::MissingFixtureDir)?;
            let replay = ReplayBackend::open(&dir)
                .map_err(|source| ConfigError::Fixtures { path: dir, source })?;
            Arc::new(replay.with_concurrency(config.concurrency))
        }
    };
    Ok(if config.cache {
        Arc::new(CachedBackend::new(base))
    } else {
        base
    })
}
