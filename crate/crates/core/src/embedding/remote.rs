use std::sync::OnceLock;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};

use super::{EmbeddingBackend, EmbeddingError, EmbeddingVector};
use crate::http::{HttpSettings, JsonEndpoint};

pub const EMBED_URL_ENV: &str = "CVA_EMBED_URL";
pub const EMBED_API_KEY_ENV: &str = "CVA_EMBED_API_KEY";

#[derive(Debug, Clone)]
pub struct RemoteEmbedderConfig {
    pub base_url: String,
    pub model: String,
    pub api_key: Option<String>,
    /// Expected output dimension; learned from the first response if unset.
    pub dim: Option<usize>,
    pub http: HttpSettings,
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    model: &'a str,
    texts: &'a [String],
}

#[derive(Deserialize)]
struct EmbedResponse {
    vectors: Vec<Vec<f32>>,
}

/// Client for a batch embedding service:
/// `POST <base_url>/embed {"model", "texts"} -> {"vectors"}`.
pub struct RemoteEmbedder {
    endpoint: JsonEndpoint,
    model: String,
    name: String,
    dim: OnceLock<usize>,
}

impl RemoteEmbedder {
    pub fn new(config: RemoteEmbedderConfig) -> Result<Self, EmbeddingError> {
        let url = format!("{}/embed", config.base_url.trim_end_matches('/'));
        let endpoint = JsonEndpoint::new(url, config.api_key, config.http)
            .map_err(|e| EmbeddingError::BackendUnavailable(e.to_string()))?;
        let dim = OnceLock::new();
        if let Some(d) = config.dim {
            let _ = dim.set(d);
        }
        Ok(RemoteEmbedder {
            endpoint,
            name: format!("remote-{}", config.model),
            model: config.model,
            dim,
        })
    }
}

#[async_trait]
impl EmbeddingBackend for RemoteEmbedder {
    fn name(&self) -> &str {
        &self.name
    }

    fn dim(&self) -> Option<usize> {
        self.dim.get().copied()
    }

    async fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        let body = EmbedRequest {
            model: &self.model,
            texts,
        };
        let resp = self
            .endpoint
            .post_json(&body)
            .await
            .map_err(|e| EmbeddingError::BackendUnavailable(e.to_string()))?;
        let parsed: EmbedResponse = serde_json::from_str(&resp.body)
            .map_err(|e| EmbeddingError::BackendUnavailable(format!("bad response body: {e}")))?;
        if parsed.vectors.len() != texts.len() {
            return Err(EmbeddingError::BackendUnavailable(format!(
                "sent {} texts, received {} vectors",
                texts.len(),
                parsed.vectors.len()
            )));
        }
        let mut out = Vec::with_capacity(parsed.vectors.len());
        for values in parsed.vectors {
            let expected = *self.dim.get_or_init(|| values.len());
            if values.len() != expected || expected == 0 {
                return Err(EmbeddingError::DimMismatch {
                    expected,
                    actual: values.len(),
                });
            }
            out.push(EmbeddingVector::new(values)?);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;
    use std::time::Duration;

    use axum::{extract::State, http::StatusCode, routing::post, Json, Router};
    use serde_json::{json, Value};

    use crate::http::RetryPolicy;

    async fn serve(router: Router) -> String {
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
        let addr = listener.local_addr().unwrap();
        tokio::spawn(async move { axum::serve(listener, router).await.unwrap() });
        format!("http://{addr}")
    }

    fn config(base_url: String) -> RemoteEmbedderConfig {
        RemoteEmbedderConfig {
            base_url,
            model: "test-model".into(),
            api_key: Some("secret".into()),
            dim: None,
            http: HttpSettings {
                timeout: Duration::from_secs(5),
                retry: RetryPolicy {
                    max_retries: 3,
                    base_delay: Duration::from_millis(5),
                    max_delay: Duration::from_millis(20),
                },
                ..HttpSettings::default()
            },
        }
    }

    #[tokio::test]
    async fn embeds_batch_and_learns_dim() {
        let router = Router::new().route(
            "/embed",
            post(|headers: axum::http::HeaderMap, Json(body): Json<Value>| async move {
                assert_eq!(headers["authorization"], "Bearer secret");
                assert_eq!(body["model"], "test-model");
                let n = body["texts"].as_array().unwrap().len();
                Json(json!({ "vectors": vec![vec![1.0, 0.0, 2.0]; n] }))
            }),
        );
        let e = RemoteEmbedder::new(config(serve(router).await)).unwrap();
        assert_eq!(e.dim(), None);
        let out = e.embed_batch(&["a".into(), "b".into()]).await.unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(e.dim(), Some(3));
    }

    #[tokio::test]
    async fn retries_then_gives_up() {
        let hits = Arc::new(AtomicUsize::new(0));
        let router = Router::new()
            .route(
                "/embed",
                post(|State(hits): State<Arc<AtomicUsize>>| async move {
                    hits.fetch_add(1, Ordering::SeqCst);
                    StatusCode::SERVICE_UNAVAILABLE
                }),
            )
            .with_state(hits.clone());
        let e = RemoteEmbedder::new(config(serve(router).await)).unwrap();
        let err = e.embed_batch(&["a".into()]).await.unwrap_err();
        assert!(matches!(err, EmbeddingError::BackendUnavailable(_)));
        assert_eq!(hits.load(Ordering::SeqCst), 4);
    }

    #[tokio::test]
    async fn rejects_inconsistent_dims() {
        let router = Router::new().route(
            "/embed",
            post(|| async { Json(json!({ "vectors": [[1.0, 2.0], [1.0]] })) }),
        );
        let e = RemoteEmbedder::new(config(serve(router).await)).unwrap();
        let err = e.embed_batch(&["a".into(), "b".into()]).await.unwrap_err();
        assert!(matches!(err, EmbeddingError::DimMismatch { expected: 2, actual: 1 }));
    }
}
