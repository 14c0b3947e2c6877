use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use async_trait::async_trait;

use super::{BackendError, GenerationRequest, GenerationResponse, TextGenerator};

/// In-memory response cache keyed by [`GenerationRequest::digest`].
/// Only successful responses are cached.
#[derive(Debug)]
pub struct CachedBackend<G> {
    inner: G,
    entries: Mutex<HashMap<String, GenerationResponse>>,
    upstream_calls: AtomicUsize,
}

impl<G> CachedBackend<G> {
    pub fn new(inner: G) -> Self {
        Self {
            inner,
            entries: Mutex::new(HashMap::new()),
            upstream_calls: AtomicUsize::new(0),
        }
    }

    pub fn upstream_calls(&self) -> usize {
        self.upstream_calls.load(Ordering::SeqCst)
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn inner(&self) -> &G {
        &self.inner
    }
}

#[async_trait]
impl<G: TextGenerator> TextGenerator for CachedBackend<G> {
    async fn generate(
        &self,
        request: &GenerationRequest,
    ) -> Result<GenerationResponse, BackendError> {
        let key = request.digest();
        if let Some(hit) = self.entries.lock().expect("cache lock").get(&key) {
            return Ok(GenerationResponse {
                latency_ms: 0,
                ..hit.clone()
            });
        }
        self.upstream_calls.fetch_add(1, Ordering::SeqCst);
        let response = self.inner.generate(request).await?;
        self.entries
            .lock()
            .expect("cache lock")
            .insert(key, response.clone());
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
    async fn second_identical_request_is_served_from_cache() {
        let cached = CachedBackend::new(ScriptedBackend::from_fn(|r| {
            Ok(format!("echo {}", r.prompt))
        }));
        let request = GenerationRequest::new("hello", 4);
        let first = cached.generate(&request).await.unwrap();
        let second = cached.generate(&request).await.unwrap();
        assert_eq!(first.text, second.text);
        assert_eq!(cached.upstream_calls(), 1);
        assert_eq!(cached.inner().calls(), 1);
        cached
            .generate(&GenerationRequest::new("other", 4))
            .await
            .unwrap();
        assert_eq!(cached.upstream_calls(), 2);
        assert_eq!(cached.len(), 2);
    }

    #[tokio::test]
    async fn errors_are_not_cached() {
        let cached = CachedBackend::new(ScriptedBackend::from_fn(|_| {
            Err(BackendError::Timeout { after_ms: 5 })
        }));
        let request = GenerationRequest::new("x", 1);
        assert!(cached.generate(&request).await.is_err());
        assert!(cached.generate(&request).await.is_err());
        assert_eq!(cached.upstream_calls(), 2);
        assert!(cached.is_empty());
    }

    #[tokio::test]
    async fn cache_on_and_off_agree() {
        let script = |r: &GenerationRequest| Ok(r.prompt.chars().rev().collect::<String>());
        let plain = ScriptedBackend::from_fn(script);
        let cached = CachedBackend::new(ScriptedBackend::from_fn(script));
        let requests: Vec<_> = ["ab", "cd", "ab", "ef", "cd"]
            .iter()
            .map(|p| GenerationRequest::new(*p, 2))
            .collect();
        let a: Vec<String> = plain
            .generate_batch(&requests)
            .await
            .unwrap()
            .into_iter()
            .map(|r| r.unwrap().text)
            .collect();
        let b: Vec<String> = cached
            .generate_batch(&requests)
            .await
            .unwrap()
            .into_iter()
            .map(|r| r.unwrap().text)
            .collect();
        assert_eq!(a, b);
        assert_eq!(plain.calls(), 5);
        assert!(cached.upstream_calls() <= 5);
        let again = cached.generate_batch(&requests).await.unwrap();
        assert_eq!(again.len(), 5);
        assert_eq!(cached.len(), 3);
    }
}
