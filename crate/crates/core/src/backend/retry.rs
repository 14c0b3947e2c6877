use std::time::Duration;

use async_trait::async_trait;

use super::{BackendError, GenerationRequest, GenerationResponse, TextGenerator};

/// Exponential backoff: the `n`th retry waits `base_delay * 2^(n-1)`, capped
/// at `max_delay`. A rate-limit response with a retry-after hint waits for
/// the hinted duration instead.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    /// Total attempts including the first one.
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 4,
            base_delay: Duration::from_millis(500),
            max_delay: Duration::from_secs(30),
        }
    }
}

impl RetryPolicy {
    pub fn backoff(&self, retry: u32) -> Duration {
        let factor = 2u32.saturating_pow(retry.saturating_sub(1));
        self.base_delay.saturating_mul(factor).min(self.max_delay)
    }
}

#[derive(Debug)]
pub struct RetryingBackend<G> {
    inner: G,
    policy: RetryPolicy,
}

impl<G> RetryingBackend<G> {
    pub fn new(inner: G, policy: RetryPolicy) -> Self {
        Self { inner, policy }
    }

    pub fn inner(&self) -> &G {
        &self.inner
    }
}

#[async_trait]
impl<G: TextGenerator> TextGenerator for RetryingBackend<G> {
    async fn generate(
        &self,
        request: &GenerationRequest,
    ) -> Result<GenerationResponse, BackendError> {
        let attempts = self.policy.max_attempts.max(1);
        let mut attempt = 1;
        loop {
            match self.inner.generate(request).await {
                Err(e) if e.is_retryable() && attempt < attempts => {
                    let wait = match &e {
                        BackendError::RateLimited {
                            retry_after: Some(after),
                        } => *after,
                        _ => self.policy.backoff(attempt),
                    };
                    log::warn!("attempt {attempt}/{attempts} failed ({e}); retrying in {wait:?}");
                    tokio::time::sleep(wait).await;
                    attempt += 1;
                }
                other => return other,
            }
        }
    }

    fn max_in_flight(&self) -> usize {
        self.inner.max_in_flight()
    }
}

#[cfg(test)]
mod tests {
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    use tokio::time::Instant;

    use super::*;
    use crate::backend::ScriptedBackend;

    fn policy(max_attempts: u32) -> RetryPolicy {
        RetryPolicy {
            max_attempts,
            base_delay: Duration::from_millis(100),
            max_delay: Duration::from_millis(250),
        }
    }

    fn failing_then_ok(failures: usize, error: BackendError) -> ScriptedBackend {
        let seen = Arc::new(AtomicUsize::new(0));
        ScriptedBackend::from_fn(move |_| {
            if seen.fetch_add(1, Ordering::SeqCst) < failures {
                Err(error.clone())
            } else {
                Ok("done".into())
            }
        })
    }

    #[test]
    fn backoff_doubles_and_caps() {
        let p = policy(5);
        assert_eq!(p.backoff(1), Duration::from_millis(100));
        assert_eq!(p.backoff(2), Duration::from_millis(200));
        assert_eq!(p.backoff(3), Duration::from_millis(250));
        assert_eq!(p.backoff(40), Duration::from_millis(250));
    }

    #[tokio::test(start_paused = true)]
    async fn recovers_within_cap() {
        let backend = RetryingBackend::new(
            failing_then_ok(2, BackendError::Timeout { after_ms: 1 }),
            policy(3),
        );
        let start = Instant::now();
        let r = backend
            .generate(&GenerationRequest::new("p", 1))
            .await
            .unwrap();
        assert_eq!(r.text, "done");
        assert_eq!(backend.inner().calls(), 3);
        assert_eq!(start.elapsed(), Duration::from_millis(300));
    }

    #[tokio::test(start_paused = true)]
    async fn never_exceeds_attempt_cap() {
        let backend = RetryingBackend::new(
            failing_then_ok(10, BackendError::Unreachable("down".into())),
            policy(4),
        );
        let r = backend.generate(&GenerationRequest::new("p", 1)).await;
        assert_eq!(r, Err(BackendError::Unreachable("down".into())));
        assert_eq!(backend.inner().calls(), 4);
    }

    #[tokio::test(start_paused = true)]
    async fn honors_retry_after() {
        let limited = BackendError::RateLimited {
            retry_after: Some(Duration::from_secs(7)),
        };
        let backend = RetryingBackend::new(failing_then_ok(1, limited), policy(2));
        let start = Instant::now();
        backend
            .generate(&GenerationRequest::new("p", 1))
            .await
            .unwrap();
        assert_eq!(start.elapsed(), Duration::from_secs(7));
    }

    #[tokio::test(start_paused = true)]
    async fn malformed_is_not_retried() {
        let backend = RetryingBackend::new(
            failing_then_ok(1, BackendError::MalformedResponse("bad json".into())),
            policy(5),
        );
        assert!(backend
            .generate(&GenerationRequest::new("p", 1))
            .await
            .is_err());
        assert_eq!(backend.inner().calls(), 1);
    }
}
