//! JSON-over-HTTP with bounded retries, an in-flight cap and request pacing.
//! Shared by the embedding-service and chat-completions clients.

use std::sync::Arc;
use std::time::Duration;

use reqwest::StatusCode;
use serde::Serialize;
use thiserror::Error;
use tokio::sync::{Mutex, Semaphore};
use tokio::time::Instant;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum HttpFailure {
    #[error("timeout")]
    Timeout,
    #[error("rate limited")]
    RateLimited,
    #[error("http status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("transport error: {0}")]
    Transport(String),
}

impl HttpFailure {
    fn retryable(&self) -> bool {
        match self {
            HttpFailure::Timeout | HttpFailure::RateLimited | HttpFailure::Transport(_) => true,
            HttpFailure::Status { status, .. } => *status >= 500,
        }
    }
}

/// Exponential backoff: `base * 2^attempt`, capped at `max_delay`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_retries: 3,
            base_delay: Duration::from_millis(500),
            max_delay: Duration::from_secs(30),
        }
    }
}

impl RetryPolicy {
    pub fn delay_for(&self, attempt: u32) -> Duration {
        let factor = 1u32.checked_shl(attempt.min(20)).unwrap_or(u32::MAX);
        self.base_delay.saturating_mul(factor).min(self.max_delay)
    }
}

#[derive(Debug, Clone)]
pub struct HttpSettings {
    pub timeout: Duration,
    pub retry: RetryPolicy,
    pub max_in_flight: usize,
    /// Minimum spacing between request starts; zero disables pacing.
    pub min_interval: Duration,
}

impl Default for HttpSettings {
    fn default() -> Self {
        HttpSettings {
            timeout: Duration::from_secs(120),
            retry: RetryPolicy::default(),
            max_in_flight: 4,
            min_interval: Duration::ZERO,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Response {
    pub status: u16,
    pub body: String,
    pub attempts: u32,
}

/// A JSON POST client for one endpoint.
#[derive(Clone)]
pub struct JsonEndpoint {
    client: reqwest::Client,
    url: String,
    api_key: Option<String>,
    settings: HttpSettings,
    in_flight: Arc<Semaphore>,
    last_start: Arc<Mutex<Option<Instant>>>,
}

impl JsonEndpoint {
    pub fn new(url: String, api_key: Option<String>, settings: HttpSettings) -> Result<Self, HttpFailure> {
        let client = reqwest::Client::builder()
            .timeout(settings.timeout)
            .build()
            .map_err(|e| HttpFailure::Transport(e.to_string()))?;
        Ok(JsonEndpoint {
            client,
            url,
            api_key,
            in_flight: Arc::new(Semaphore::new(settings.max_in_flight.max(1))),
            last_start: Arc::new(Mutex::new(None)),
            settings,
        })
    }

    pub fn url(&self) -> &str {
        &self.url
    }

    async fn pace(&self) {
        if self.settings.min_interval.is_zero() {
            return;
        }
        let mut last = self.last_start.lock().await;
        if let Some(prev) = *last {
            let next = prev + self.settings.min_interval;
            if next > Instant::now() {
                tokio::time::sleep_until(next).await;
            }
        }
        *last = Some(Instant::now());
    }

    async fn attempt<B: Serialize + ?Sized>(&self, body: &B) -> Result<Response, HttpFailure> {
        let mut req = self.client.post(&self.url).json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().await.map_err(classify)?;
        let status = resp.status();
        let text = resp.text().await.map_err(classify)?;
        if status == StatusCode::TOO_MANY_REQUESTS {
            return Err(HttpFailure::RateLimited);
        }
        if !status.is_success() {
            return Err(HttpFailure::Status {
                status: status.as_u16(),
                body: text,
            });
        }
        Ok(Response {
            status: status.as_u16(),
            body: text,
            attempts: 0,
        })
    }

    /// POSTs `body`, retrying timeouts, 429s, 5xx and transport errors.
    pub async fn post_json<B: Serialize + ?Sized>(&self, body: &B) -> Result<Response, HttpFailure> {
        let _permit = self
            .in_flight
            .acquire()
            .await
            .expect("semaphore is never closed");
        let mut attempt = 0;
        loop {
            self.pace().await;
            match self.attempt(body).await {
                Ok(mut resp) => {
                    resp.attempts = attempt + 1;
                    return Ok(resp);
                }
                Err(e) if e.retryable() && attempt < self.settings.retry.max_retries => {
                    let delay = self.settings.retry.delay_for(attempt);
                    tracing::debug!(url = %self.url, attempt, error = %e, ?delay, "retrying");
                    tokio::time::sleep(delay).await;
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }
}

fn classify(e: reqwest::Error) -> HttpFailure {
    if e.is_timeout() {
        HttpFailure::Timeout
    } else {
        HttpFailure::Transport(e.to_string())
    }
}
