//! OpenAI-compatible chat-completions client with bounded retries.

use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

/// Environment variable holding the optional bearer token.
pub const API_KEY_ENV: &str = "BEACOF_API_KEY";

/// Path appended to the configured base URL.
pub const CHAT_COMPLETIONS_PATH: &str = "/v1/chat/completions";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EndpointConfig {
    pub base_url: String,
    pub model_name: String,
    pub timeout_secs: f64,
    pub max_tokens: u32,
    pub temperature: f64,
    /// Total attempts per request, including the first.
    pub retry_budget: u32,
    /// Delay before the first retry; doubles on each further retry.
    pub backoff_initial_ms: u64,
    /// Cap on in-flight requests across every client sharing a limiter.
    /// Zero means unlimited.
    pub max_concurrent_requests: usize,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        Self {
            base_url: "http://localhost:11434".to_string(),
            model_name: "llama3.1:8b".to_string(),
            timeout_secs: 300.0,
            max_tokens: 4096,
            temperature: 0.0,
            retry_budget: 3,
            backoff_initial_ms: 500,
            max_concurrent_requests: 0,
        }
    }
}

impl EndpointConfig {
    pub fn url(&self) -> String {
        format!("{}{}", self.base_url.trim_end_matches('/'), CHAT_COMPLETIONS_PATH)
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout_secs.max(0.001))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpResponse {
    pub status: u16,
    pub body: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TransportError {
    #[error("request timed out")]
    Timeout,
    #[error("transport failure: {0}")]
    Io(String),
}

/// Blocking HTTP POST of a JSON body.
pub trait ChatTransport: Send + Sync {
    fn post_json(
        &self,
        url: &str,
        bearer: Option<&str>,
        body: &str,
        timeout: Duration,
    ) -> Result<HttpResponse, TransportError>;
}

/// Production transport over `ureq`.
#[derive(Debug, Default, Clone)]
pub struct UreqTransport;

impl ChatTransport for UreqTransport {
    fn post_json(
        &self,
        url: &str,
        bearer: Option<&str>,
        body: &str,
        timeout: Duration,
    ) -> Result<HttpResponse, TransportError> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        let mut request = agent.post(url).header("Content-Type", "application/json");
        if let Some(token) = bearer {
            request = request.header("Authorization", &format!("Bearer {token}"));
        }
        let mut response = request.send(body).map_err(|e| match e {
            ureq::Error::Timeout(_) => TransportError::Timeout,
            other => TransportError::Io(other.to_string()),
        })?;
        let status = response.status().as_u16();
        let body = response
            .body_mut()
            .read_to_string()
            .map_err(|e| match e {
                ureq::Error::Timeout(_) => TransportError::Timeout,
                other => TransportError::Io(other.to_string()),
            })?;
        Ok(HttpResponse { status, body })
    }
}

/// Transport for runs that must never reach the network.
#[derive(Debug, Default, Clone)]
pub struct OfflineTransport;

impl ChatTransport for OfflineTransport {
    fn post_json(&self, url: &str, _: Option<&str>, _: &str, _: Duration) -> Result<HttpResponse, TransportError> {
        Err(TransportError::Io(format!("network access disabled (attempted {url})")))
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LlmError {
    #[error("request timed out after {attempts} attempt(s)")]
    Timeout { attempts: u32 },
    #[error("server returned status {status} after {attempts} attempt(s): {body}")]
    Status { status: u16, body: String, attempts: u32 },
    #[error("transport failed after {attempts} attempt(s): {message}")]
    Transport { message: String, attempts: u32 },
    #[error("server returned an empty completion")]
    EmptyCompletion,
    #[error("malformed completion payload: {0}")]
    MalformedResponse(String),
}

impl LlmError {
    /// Whether the failure came from the transport rather than the payload.
    pub fn is_transport(&self) -> bool {
        matches!(
            self,
            LlmError::Timeout { .. } | LlmError::Status { .. } | LlmError::Transport { .. }
        )
    }
}

/// Counting semaphore capping concurrent requests.
#[derive(Debug)]
pub struct RequestLimiter {
    cap: usize,
    in_flight: Mutex<usize>,
    freed: Condvar,
}

impl RequestLimiter {
    pub fn new(cap: usize) -> Self {
        Self {
            cap,
            in_flight: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> LimiterPermit<'_> {
        if self.cap > 0 {
            let mut n = self.in_flight.lock().unwrap_or_else(|e| e.into_inner());
            while *n >= self.cap {
                n = self.freed.wait(n).unwrap_or_else(|e| e.into_inner());
            }
            *n += 1;
        }
        LimiterPermit { limiter: self }
    }
}

pub struct LimiterPermit<'a> {
    limiter: &'a RequestLimiter,
}

impl Drop for LimiterPermit<'_> {
    fn drop(&mut self) {
        if self.limiter.cap > 0 {
            let mut n = self.limiter.in_flight.lock().unwrap_or_else(|e| e.into_inner());
            *n -= 1;
            self.limiter.freed.notify_one();
        }
    }
}

/// Request body for one system + user exchange.
pub fn build_request_body(endpoint: &EndpointConfig, system_prompt: &str, user_prompt: &str) -> String {
    json!({
        "model": endpoint.model_name,
        "messages": [
            {"role": "system", "content": system_prompt},
            {"role": "user", "content": user_prompt},
        ],
        "temperature": endpoint.temperature,
        "max_tokens": endpoint.max_tokens,
    })
    .to_string()
}

fn extract_content(body: &str) -> Result<String, LlmError> {
    let value: serde_json::Value =
        serde_json::from_str(body).map_err(|e| LlmError::MalformedResponse(e.to_string()))?;
    let content = value
        .pointer("/choices/0/message/content")
        .and_then(|c| c.as_str())
        .ok_or_else(|| LlmError::MalformedResponse("missing choices[0].message.content".into()))?;
    if content.trim().is_empty() {
        return Err(LlmError::EmptyCompletion);
    }
    Ok(content.to_string())
}

#[derive(Clone)]
pub struct ChatClient {
    endpoint: EndpointConfig,
    transport: Arc<dyn ChatTransport>,
    api_key: Option<String>,
    limiter: Arc<RequestLimiter>,
}

impl std::fmt::Debug for ChatClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ChatClient")
            .field("endpoint", &self.endpoint)
            .field("api_key", &self.api_key.as_ref().map(|_| "<redacted>"))
            .finish()
    }
}

impl ChatClient {
    /// Reads the bearer token from [`API_KEY_ENV`] if set.
    pub fn new(endpoint: EndpointConfig, transport: Arc<dyn ChatTransport>) -> Self {
        let api_key = std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty());
        let limiter = Arc::new(RequestLimiter::new(endpoint.max_concurrent_requests));
        Self {
            endpoint,
            transport,
            api_key,
            limiter,
        }
    }

    pub fn with_api_key(mut self, key: Option<String>) -> Self {
        self.api_key = key;
        self
    }

    /// Shares one limiter between several clients.
    pub fn with_limiter(mut self, limiter: Arc<RequestLimiter>) -> Self {
        self.limiter = limiter;
        self
    }

    pub fn endpoint(&self) -> &EndpointConfig {
        &self.endpoint
    }

    /// Sends one chat request, retrying timeouts, transport failures, 429
    /// and 5xx responses with exponential backoff until the budget is spent.
    pub fn chat_complete(&self, system_prompt: &str, user_prompt: &str) -> Result<String, LlmError> {
        let url = self.endpoint.url();
        let body = build_request_body(&self.endpoint, system_prompt, user_prompt);
        let budget = self.endpoint.retry_budget.max(1);
        let mut last = LlmError::Transport {
            message: "no attempt made".into(),
            attempts: 0,
        };
        for attempt in 1..=budget {
            if attempt > 1 {
                let delay = self.endpoint.backoff_initial_ms.saturating_mul(1 << (attempt - 2).min(16));
                std::thread::sleep(Duration::from_millis(delay));
            }
            let outcome = {
                let _permit = self.limiter.acquire();
                self.transport
                    .post_json(&url, self.api_key.as_deref(), &body, self.endpoint.timeout())
            };
            match outcome {
                Ok(resp) if (200..300).contains(&resp.status) => {
                    if attempt > 1 {
                        log::info!("chat completion succeeded after {} retries", attempt - 1);
                    }
                    return extract_content(&resp.body);
                }
                Ok(resp) => {
                    let retryable = resp.status == 429 || resp.status >= 500;
                    last = LlmError::Status {
                        status: resp.status,
                        body: resp.body,
                        attempts: attempt,
                    };
                    if !retryable {
                        return Err(last);
                    }
                }
                Err(TransportError::Timeout) => last = LlmError::Timeout { attempts: attempt },
                Err(TransportError::Io(message)) => {
                    last = LlmError::Transport {
                        message,
                        attempts: attempt,
                    }
                }
            }
            log::warn!("chat completion attempt {attempt}/{budget} failed: {last}");
        }
        Err(last)
    }
}
