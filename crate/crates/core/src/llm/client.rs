use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use super::prompt::PromptBundle;
use crate::http::{HttpFailure, HttpSettings, JsonEndpoint, RetryPolicy};

pub const LLM_URL_ENV: &str = "CVA_LLM_URL";
pub const LLM_API_KEY_ENV: &str = "CVA_LLM_API_KEY";

/// Model and sampling settings for one model-temperature cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmRunConfig {
    pub model: String,
    pub temperature: f64,
    /// Columns per request: 25 for bulk endpoints, 1 for one-at-a-time.
    pub batch_size: usize,
    pub repetitions: usize,
    pub max_retries: u32,
    #[serde(with = "secs")]
    pub timeout: Duration,
    pub max_in_flight: usize,
    /// Upper bound on the inlined glossary, in bytes.
    pub context_budget: usize,
}

mod secs {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let secs = f64::deserialize(d)?;
        Duration::try_from_secs_f64(secs).map_err(serde::de::Error::custom)
    }
}

impl Default for LlmRunConfig {
    fn default() -> Self {
        LlmRunConfig {
            model: String::new(),
            temperature: 0.5,
            batch_size: 25,
            repetitions: 3,
            max_retries: 3,
            timeout: Duration::from_secs(300),
            max_in_flight: 4,
            context_budget: 4 * 1024 * 1024,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("temperature must lie in [0, 2], got {0}")]
    Temperature(String),
    #[error("{0} must be positive")]
    NotPositive(&'static str),
    #[error("model name is empty")]
    EmptyModel,
}

impl LlmRunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(ConfigError::Temperature(self.temperature.to_string()));
        }
        if self.model.is_empty() {
            return Err(ConfigError::EmptyModel);
        }
        if self.batch_size == 0 {
            return Err(ConfigError::NotPositive("batch_size"));
        }
        if self.repetitions == 0 {
            return Err(ConfigError::NotPositive("repetitions"));
        }
        if self.max_in_flight == 0 {
            return Err(ConfigError::NotPositive("max_in_flight"));
        }
        if self.timeout.is_zero() {
            return Err(ConfigError::NotPositive("timeout"));
        }
        Ok(())
    }
}

/// Where and how to reach the chat service.
#[derive(Debug, Clone)]
pub struct ChatEndpoint {
    pub base_url: String,
    pub api_key: Option<String>,
    pub backoff_base: Duration,
    pub backoff_max: Duration,
    pub min_interval: Duration,
}

impl ChatEndpoint {
    pub fn new(base_url: impl Into<String>) -> Self {
        ChatEndpoint {
            base_url: base_url.into(),
            api_key: None,
            backoff_base: Duration::from_millis(500),
            backoff_max: Duration::from_secs(30),
            min_interval: Duration::ZERO,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ChatFailure {
    #[error("timeout")]
    Timeout,
    #[error("rate limited")]
    RateLimited,
    #[error("http status {0}")]
    HttpError(u16),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("model refusal")]
    Refusal,
    #[error("malformed response: {0}")]
    BadResponse(String),
    #[error("glossary context of {size} bytes exceeds budget of {budget}")]
    ContextBudget { size: usize, budget: usize },
}

impl From<HttpFailure> for ChatFailure {
    fn from(f: HttpFailure) -> Self {
        match f {
            HttpFailure::Timeout => ChatFailure::Timeout,
            HttpFailure::RateLimited => ChatFailure::RateLimited,
            HttpFailure::Status { status, .. } => ChatFailure::HttpError(status),
            HttpFailure::Transport(t) => ChatFailure::Transport(t),
        }
    }
}

/// `runs/<model>/<temperature>/<repetition>/<batch>.{request,response}.json`
#[derive(Debug, Clone)]
pub struct BatchArchive {
    pub request: PathBuf,
    pub response: PathBuf,
}

pub fn model_dir_name(model: &str) -> String {
    model
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
        .collect()
}

impl BatchArchive {
    pub fn new(root: &Path, model: &str, temperature: f64, repetition: usize, batch: usize) -> Self {
        let dir = root
            .join("runs")
            .join(model_dir_name(model))
            .join(temperature.to_string())
            .join(repetition.to_string());
        BatchArchive {
            request: dir.join(format!("{batch}.request.json")),
            response: dir.join(format!("{batch}.response.json")),
        }
    }

    fn write(path: &Path, value: &Value) {
        let result = path
            .parent()
            .map_or(Ok(()), std::fs::create_dir_all)
            .and_then(|_| std::fs::write(path, serde_json::to_vec_pretty(value).unwrap_or_default()));
        if let Err(e) = result {
            tracing::warn!(path = %path.display(), error = %e, "could not archive");
        }
    }
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: Message,
}

#[derive(Deserialize)]
struct Message {
    content: Option<String>,
}

fn is_refusal(content: &str) -> bool {
    let core = content
        .trim()
        .trim_matches(|c: char| c == '"' || c == '\'' || c == '.' || c == '!' || c.is_whitespace());
    core.eq_ignore_ascii_case("failure")
}

/// Chat-completions client bound to one endpoint and run configuration.
#[derive(Clone)]
pub struct ChatClient {
    endpoint: JsonEndpoint,
}

impl ChatClient {
    pub fn new(endpoint: &ChatEndpoint, config: &LlmRunConfig) -> Result<Self, ChatFailure> {
        let url = format!("{}/v1/chat/completions", endpoint.base_url.trim_end_matches('/'));
        let settings = HttpSettings {
            timeout: config.timeout,
            retry: RetryPolicy {
                max_retries: config.max_retries,
                base_delay: endpoint.backoff_base,
                max_delay: endpoint.backoff_max,
            },
            max_in_flight: config.max_in_flight,
            min_interval: endpoint.min_interval,
        };
        Ok(ChatClient {
            endpoint: JsonEndpoint::new(url, endpoint.api_key.clone(), settings)?,
        })
    }

    pub fn request_body(config: &LlmRunConfig, bundle: &PromptBundle) -> Value {
        json!({
            "model": config.model,
            "temperature": config.temperature,
            "messages": [
                {"role": "system", "content": bundle.assistant_instructions},
                {"role": "user", "content": bundle.user_message()},
            ],
        })
    }

    /// Sends one prompt and returns the assistant's message text.
    pub async fn chat_complete(
        &self,
        config: &LlmRunConfig,
        bundle: &PromptBundle,
        archive: Option<&BatchArchive>,
    ) -> Result<String, ChatFailure> {
        let body = Self::request_body(config, bundle);
        if let Some(a) = archive {
            BatchArchive::write(&a.request, &body);
        }
        let result = self.send(&body).await;
        if let Some(a) = archive {
            let record = match &result {
                Ok((raw, _)) => serde_json::from_str(raw).unwrap_or_else(|_| json!({ "raw": raw })),
                Err(e) => json!({ "error": e.to_string() }),
            };
            BatchArchive::write(&a.response, &record);
        }
        result.map(|(_, content)| content)
    }

    async fn send(&self, body: &Value) -> Result<(String, String), ChatFailure> {
        let resp = self.endpoint.post_json(body).await?;
        let parsed: ChatResponse =
            serde_json::from_str(&resp.body).map_err(|e| ChatFailure::BadResponse(e.to_string()))?;
        let content = parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| ChatFailure::BadResponse("no message content".into()))?;
        if is_refusal(&content) {
            return Err(ChatFailure::Refusal);
        }
        Ok((resp.body, content))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        let ok = LlmRunConfig {
            model: "m".into(),
            ..LlmRunConfig::default()
        };
        assert!(ok.validate().is_ok());
        for t in [-0.1, 2.01, f64::NAN] {
            let bad = LlmRunConfig { temperature: t, ..ok.clone() };
            assert!(matches!(bad.validate(), Err(ConfigError::Temperature(_))));
        }
        let bad = LlmRunConfig { repetitions: 0, ..ok.clone() };
        assert_eq!(bad.validate(), Err(ConfigError::NotPositive("repetitions")));
    }

    #[test]
    fn refusal_detection() {
        assert!(is_refusal("failure"));
        assert!(is_refusal(" \"Failure.\"\n"));
        assert!(!is_refusal("'colID': 'failure', 'propID': []"));
    }

    #[test]
    fn archive_layout() {
        let a = BatchArchive::new(Path::new("/out"), "meta/llama3-8b", 0.75, 2, 5);
        assert_eq!(a.request, PathBuf::from("/out/runs/meta_llama3-8b/0.75/2/5.request.json"));
        assert_eq!(a.response, PathBuf::from("/out/runs/meta_llama3-8b/0.75/2/5.response.json"));
        let a = BatchArchive::new(Path::new("/out"), "m", 1.0, 0, 0);
        assert_eq!(a.request, PathBuf::from("/out/runs/m/1/0/0.request.json"));
    }
}
