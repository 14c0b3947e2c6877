use std::collections::HashMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Duration;

use async_trait::async_trait;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    BackendError, GenerationRequest, GenerationResponse, TextGenerator, DEFAULT_CONCURRENCY,
};

/// One recorded exchange, stored as `<digest>.json` in a fixture directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fixture {
    pub request: GenerationRequest,
    pub response: GenerationResponse,
}

impl Fixture {
    pub fn file_name(request: &GenerationRequest) -> String {
        format!("{}.json", request.digest())
    }

    pub fn write(&self, dir: &Path) -> io::Result<PathBuf> {
        let path = dir.join(Self::file_name(&self.request));
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, serde_json::to_vec_pretty(self)?)?;
        fs::rename(&tmp, &path)?;
        Ok(path)
    }
}

/// Serves responses recorded by [`RecordingBackend`]. A request without a
/// fixture fails with [`BackendError::MalformedResponse`].
#[derive(Debug)]
pub struct ReplayBackend {
    fixtures: HashMap<String, GenerationResponse>,
    jitter: Option<(Mutex<ChaCha8Rng>, Duration)>,
    concurrency: usize,
}

impl ReplayBackend {
    pub fn open(dir: impl AsRef<Path>) -> io::Result<Self> {
        let dir = dir.as_ref();
        let mut fixtures = HashMap::new();
        for entry in fs::read_dir(dir)? {
            let path = entry?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("json") {
                continue;
            }
            let fixture: Fixture = serde_json::from_slice(&fs::read(&path)?).map_err(|e| {
                io::Error::new(
                    io::ErrorKind::InvalidData,
                    format!("{}: {e}", path.display()),
                )
            })?;
            fixtures.insert(fixture.request.digest(), fixture.response);
        }
        log::debug!(
            "loaded {} replay fixtures from {}",
            fixtures.len(),
            dir.display()
        );
        Ok(Self::from_fixtures(fixtures))
    }

    pub fn from_fixtures(fixtures: impl IntoIterator<Item = (String, GenerationResponse)>) -> Self {
        Self {
            fixtures: fixtures.into_iter().collect(),
            jitter: None,
            concurrency: DEFAULT_CONCURRENCY,
        }
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (GenerationRequest, String)>) -> Self {
        Self::from_fixtures(
            pairs
                .into_iter()
                .map(|(request, text)| (request.digest(), GenerationResponse::text(text))),
        )
    }

    /// Delays every response by a random duration up to `max`, so batch
    /// completion order varies with `seed`.
    pub fn with_latency_jitter(mut self, seed: u64, max: Duration) -> Self {
        self.jitter = Some((Mutex::new(ChaCha8Rng::seed_from_u64(seed)), max));
        self
    }

    pub fn with_concurrency(mut self, limit: usize) -> Self {
        self.concurrency = limit;
        self
    }

    pub fn len(&self) -> usize {
        self.fixtures.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fixtures.is_empty()
    }
}

#[async_trait]
impl TextGenerator for ReplayBackend {
    async fn generate(
        &self,
        request: &GenerationRequest,
    ) -> Result<GenerationResponse, BackendError> {
        request.check()?;
        if let Some((rng, max)) = &self.jitter {
            let micros = rng
                .lock()
                .expect("jitter lock")
                .random_range(0..=max.as_micros() as u64);
            tokio::time::sleep(Duration::from_micros(micros)).await;
        }
        let digest = request.digest();
        self.fixtures.get(&digest).cloned().ok_or_else(|| {
            BackendError::MalformedResponse(format!("no replay fixture for request {digest}"))
        })
    }

    fn max_in_flight(&self) -> usize {
        self.concurrency
    }
}

/// Persists every successful response of the wrapped backend as a fixture.
#[derive(Debug)]
pub struct RecordingBackend<G> {
    inner: G,
    dir: PathBuf,
}

impl<G> RecordingBackend<G> {
    pub fn new(inner: G, dir: impl Into<PathBuf>) -> io::Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self { inner, dir })
    }
}

#[async_trait]
impl<G: TextGenerator> TextGenerator for RecordingBackend<G> {
    async fn generate(
        &self,
        request: &GenerationRequest,
    ) -> Result<GenerationResponse, BackendError> {
        let response = self.inner.generate(request).await?;
        let fixture = Fixture {
            request: request.clone(),
            response: response.clone(),
        };
        if let Err(e) = fixture.write(&self.dir) {
            log::error!("failed to record fixture in {}: {e}", self.dir.display());
        }
        Ok(response)
    }

    fn max_in_flight(&self) -> usize {
        self.inner.max_in_flight()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::ScriptedBackend;

    #[tokio::test]
    async fn missing_fixture_is_malformed() {
        let replay = ReplayBackend::from_pairs([]);
        assert!(matches!(
            replay
                .generate(&GenerationRequest::new("What is the Name?", 8))
                .await,
            Err(BackendError::MalformedResponse(_))
        ));
    }

    #[tokio::test]
    async fn record_then_replay() {
        let dir = tempfile::tempdir().unwrap();
        let live = ScriptedBackend::from_fn(|r| Ok(format!("live:{}", r.prompt)));
        let recorder = RecordingBackend::new(live, dir.path()).unwrap();
        let requests: Vec<_> = ["a", "b", "c"]
            .iter()
            .map(|p| GenerationRequest::new(*p, 4))
            .collect();
        let live_out: Vec<_> = recorder
            .generate_batch(&requests)
            .await
            .unwrap()
            .into_iter()
            .map(|r| r.unwrap().text)
            .collect();
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 3);

        let replay = ReplayBackend::open(dir.path()).unwrap();
        assert_eq!(replay.len(), 3);
        let replayed: Vec<_> = replay
            .generate_batch(&requests)
            .await
            .unwrap()
            .into_iter()
            .map(|r| r.unwrap().text)
            .collect();
        assert_eq!(live_out, replayed);
        assert!(replay
            .generate(&GenerationRequest::new("a", 5))
            .await
            .is_err());
    }

    #[tokio::test(start_paused = true)]
    async fn jitter_does_not_change_results() {
        let pairs: Vec<_> = (0..8)
            .map(|i| (GenerationRequest::new(format!("q{i}"), 2), format!("a{i}")))
            .collect();
        let requests: Vec<_> = pairs.iter().map(|(r, _)| r.clone()).collect();
        let mut outputs = Vec::new();
        for seed in 0..5 {
            let replay = ReplayBackend::from_pairs(pairs.clone())
                .with_latency_jitter(seed, Duration::from_millis(20));
            let out: Vec<_> = replay
                .generate_batch(&requests)
                .await
                .unwrap()
                .into_iter()
                .map(|r| r.unwrap().text)
                .collect();
            outputs.push(out);
        }
        assert!(outputs.windows(2).all(|w| w[0] == w[1]));
        assert_eq!(outputs[0][7], "a7");
    }

    #[test]
    fn open_rejects_corrupt_fixture() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("x.json"), "{not json").unwrap();
        assert!(ReplayBackend::open(dir.path()).is_err());
        assert!(ReplayBackend::open(dir.path().join("missing")).is_err());
    }
}
