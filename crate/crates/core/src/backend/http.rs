use std::time::{Duration, Instant};

use async_trait::async_trait;
use reqwest::header::RETRY_AFTER;
use reqwest::StatusCode;
use serde::{Deserialize, Serialize};

use super::{
    BackendError, GenerationRequest, GenerationResponse, TextGenerator, Usage, DEFAULT_CONCURRENCY,
};

/// Client for the common open completion API: `POST {base}{path}` with
/// `{model, prompt, max_tokens, temperature: 0}`.
#[derive(Debug, Clone)]
pub struct HttpBackend {
    client: reqwest::Client,
    url: String,
    model: String,
    auth: Option<(String, String)>,
    timeout: Duration,
    concurrency: usize,
}

#[derive(Debug, Serialize)]
struct CompletionBody<'a> {
    model: &'a str,
    prompt: &'a str,
    max_tokens: u32,
    temperature: f32,
}

#[derive(Debug, Deserialize)]
struct CompletionReply {
    #[serde(default)]
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<ReplyUsage>,
}

#[derive(Debug, Deserialize)]
struct Choice {
    #[serde(default)]
    text: Option<String>,
    #[serde(default)]
    message: Option<Message>,
}

#[derive(Debug, Deserialize)]
struct Message {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Debug, Deserialize)]
struct ReplyUsage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

impl HttpBackend {
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
            concurrency: DEFAULT_CONCURRENCY,
        })
    }

    /// Sends `header: Bearer <token>` with every request.
    pub fn with_bearer(mut self, header: impl Into<String>, token: &str) -> Self {
        self.auth = Some((header.into(), format!("Bearer {token}")));
        self
    }

    pub fn with_concurrency(mut self, limit: usize) -> Self {
        self.concurrency = limit;
        self
    }

    pub fn url(&self) -> &str {
        &self.url
    }
}

pub(crate) fn join_url(base: &str, path: &str) -> String {
    format!(
        "{}/{}",
        base.trim_end_matches('/'),
        path.trim_start_matches('/')
    )
}

pub(crate) fn transport_error(e: reqwest::Error, timeout: Duration) -> BackendError {
    if e.is_timeout() {
        BackendError::Timeout {
            after_ms: timeout.as_millis() as u64,
        }
    } else if e.is_decode() {
        BackendError::MalformedResponse(e.to_string())
    } else {
        BackendError::Unreachable(e.to_string())
    }
}

/// Maps a non-success status to the error family callers retry on.
pub(crate) async fn status_error(response: reqwest::Response, timeout: Duration) -> BackendError {
    let status = response.status();
    let retry_after = response
        .headers()
        .get(RETRY_AFTER)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.trim().parse::<f64>().ok())
        .filter(|s| s.is_finite() && *s >= 0.0)
        .map(Duration::from_secs_f64);
    let body = response.text().await.unwrap_or_default();
    match status {
        StatusCode::TOO_MANY_REQUESTS => BackendError::RateLimited { retry_after },
        StatusCode::REQUEST_TIMEOUT | StatusCode::GATEWAY_TIMEOUT => BackendError::Timeout {
            after_ms: timeout.as_millis() as u64,
        },
        s if s.is_server_error() => BackendError::Unreachable(format!("server error {s}: {body}")),
        s => BackendError::Rejected {
            status: s.as_u16(),
            body,
        },
    }
}

#[async_trait]
impl TextGenerator for HttpBackend {
    async fn generate(
        &self,
        request: &GenerationRequest,
    ) -> Result<GenerationResponse, BackendError> {
        request.check()?;
        let body = CompletionBody {
            model: &self.model,
            prompt: &request.prompt,
            max_tokens: request.max_new_tokens,
            temperature: 0.0,
        };
        let mut builder = self.client.post(&self.url).json(&body);
        if let Some((name, value)) = &self.auth {
            builder = builder.header(name.as_str(), value.as_str());
        }
        let started = Instant::now();
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
        let reply: CompletionReply = serde_json::from_slice(&bytes)
            .map_err(|e| BackendError::MalformedResponse(e.to_string()))?;
        let choice = reply
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| BackendError::MalformedResponse("response has no choices".into()))?;
        let text = choice
            .text
            .or_else(|| choice.message.and_then(|m| m.content))
            .ok_or_else(|| BackendError::MalformedResponse("choice has no text".into()))?;
        Ok(GenerationResponse {
            text,
            usage: reply.usage.map(|u| Usage {
                prompt_tokens: u.prompt_tokens,
                completion_tokens: u.completion_tokens,
            }),
            latency_ms: started.elapsed().as_millis() as u64,
        })
    }

    fn max_in_flight(&self) -> usize {
        self.concurrency
    }
}

#[cfg(test)]
mod tests {
    use std::sync::{Arc, Mutex};

    use axum::extract::State;
    use axum::http::{HeaderMap, StatusCode};
    use axum::response::IntoResponse;
    use axum::routing::post;
    use axum::{Json, Router};
    use serde_json::{json, Value};

    use super::*;

    type Seen = Arc<Mutex<Vec<(Option<String>, Value)>>>;

    async fn completions(
        State(seen): State<Seen>,
        headers: HeaderMap,
        Json(body): Json<Value>,
    ) -> impl IntoResponse {
        let auth = headers
            .get("authorization")
            .map(|v| v.to_str().unwrap().to_string());
        seen.lock().unwrap().push((auth, body.clone()));
        match body["prompt"].as_str().unwrap() {
            "limit" => (
                StatusCode::TOO_MANY_REQUESTS,
                [("retry-after", "3")],
                "slow down",
            )
                .into_response(),
            "boom" => (StatusCode::INTERNAL_SERVER_ERROR, "boom").into_response(),
            "bad" => (StatusCode::BAD_REQUEST, "bad").into_response(),
            "garbage" => (StatusCode::OK, "not json").into_response(),
            "empty" => Json(json!({"choices": []})).into_response(),
            "chat" => {
                Json(json!({"choices": [{"message": {"content": "via chat"}}]})).into_response()
            }
            "sleep" => {
                tokio::time::sleep(Duration::from_millis(500)).await;
                Json(json!({"choices": [{"text": "late"}]})).into_response()
            }
            p => Json(json!({
                "choices": [{"text": format!("echo {p}")}],
                "usage": {"prompt_tokens": 3, "completion_tokens": 2}
            }))
            .into_response(),
        }
    }

    async fn serve() -> (String, Seen) {
        let seen: Seen = Arc::default();
        let app = Router::new()
            .route("/v1/completions", post(completions))
            .with_state(seen.clone());
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
        let addr = listener.local_addr().unwrap();
        tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
        (format!("http://{addr}"), seen)
    }

    #[tokio::test]
    async fn sends_completion_body_and_parses_reply() {
        let (base, seen) = serve().await;
        let backend = HttpBackend::new(&base, "/v1/completions", "flan", Duration::from_secs(5))
            .unwrap()
            .with_bearer("Authorization", "sk-test");
        let r = backend
            .generate(&GenerationRequest::new("hello", 12))
            .await
            .unwrap();
        assert_eq!(r.text, "echo hello");
        assert_eq!(
            r.usage,
            Some(Usage {
                prompt_tokens: 3,
                completion_tokens: 2
            })
        );
        let (auth, body) = seen.lock().unwrap()[0].clone();
        assert_eq!(auth.as_deref(), Some("Bearer sk-test"));
        assert_eq!(
            body,
            json!({"model": "flan", "prompt": "hello", "max_tokens": 12, "temperature": 0.0})
        );
        let r = backend
            .generate(&GenerationRequest::new("chat", 12))
            .await
            .unwrap();
        assert_eq!(r.text, "via chat");
    }

    #[tokio::test]
    async fn maps_error_statuses() {
        let (base, _) = serve().await;
        let backend =
            HttpBackend::new(&base, "v1/completions", "m", Duration::from_millis(200)).unwrap();
        let gen = |p: &'static str| {
            let backend = backend.clone();
            async move { backend.generate(&GenerationRequest::new(p, 4)).await }
        };
        assert_eq!(
            gen("limit").await,
            Err(BackendError::RateLimited {
                retry_after: Some(Duration::from_secs(3))
            })
        );
        assert!(matches!(
            gen("boom").await,
            Err(BackendError::Unreachable(_))
        ));
        assert_eq!(
            gen("bad").await,
            Err(BackendError::Rejected {
                status: 400,
                body: "bad".into()
            })
        );
        assert!(matches!(
            gen("garbage").await,
            Err(BackendError::MalformedResponse(_))
        ));
        assert!(matches!(
            gen("empty").await,
            Err(BackendError::MalformedResponse(_))
        ));
        assert_eq!(
            gen("sleep").await,
            Err(BackendError::Timeout { after_ms: 200 })
        );
    }

    #[tokio::test]
    async fn unreachable_host() {
        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        drop(listener);
        let backend =
            HttpBackend::new(&format!("http://{addr}"), "/x", "m", Duration::from_secs(2)).unwrap();
        assert!(matches!(
            backend.generate(&GenerationRequest::new("p", 1)).await,
            Err(BackendError::Unreachable(_))
        ));
    }

    #[test]
    fn url_joining() {
        assert_eq!(
            join_url("http://h:1/", "/v1/completions"),
            "http://h:1/v1/completions"
        );
        assert_eq!(join_url("http://h:1/api", "v1/x"), "http://h:1/api/v1/x");
    }
}
