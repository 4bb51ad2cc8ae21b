//! Scripted chat-completions server for offline runs.
//!
//! A script is a comma-separated list of `behavior` or `key=behavior` items,
//! where `key` is a model name or `model@temperature`, e.g.
//! `echo-valid-mapping,gemma-7b=fail-rate(1.0)`. Behaviors may be chained
//! with `+`: gating steps (`rate-limit(n)`, `fail-rate(p)`, `timeout`) run
//! in order before the answering step (`echo-valid-mapping` or
//! `inject-hallucinations`, default echo).

use std::collections::HashMap;
use std::fmt;
use std::net::SocketAddr;
use std::str::FromStr;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::{Json, Router};
use serde_json::{json, Value};
use thiserror::Error;
use tokio::task::JoinHandle;

use crate::embedding::fnv1a_64;

#[derive(Debug, Error)]
pub enum MockError {
    #[error("port {0} is already in use")]
    PortInUse(u16),
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: SocketAddr,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid mock script `{0}`: {1}")]
    Script(String, String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Behavior {
    EchoValidMapping,
    InjectHallucinations,
    /// Answers `failure` with probability `p`.
    FailRate(f64),
    /// Never answers in time.
    Timeout,
    /// The first `n` requests for this key get HTTP 429.
    RateLimit(u32),
}

impl fmt::Display for Behavior {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Behavior::EchoValidMapping => f.write_str("echo-valid-mapping"),
            Behavior::InjectHallucinations => f.write_str("inject-hallucinations"),
            Behavior::FailRate(p) => write!(f, "fail-rate({p})"),
            Behavior::Timeout => f.write_str("timeout"),
            Behavior::RateLimit(n) => write!(f, "rate-limit({n})"),
        }
    }
}

fn arg<'a>(s: &'a str, name: &str) -> Option<&'a str> {
    s.strip_prefix(name)?.strip_prefix('(')?.strip_suffix(')').map(str::trim)
}

impl FromStr for Behavior {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        match s {
            "echo-valid-mapping" => return Ok(Behavior::EchoValidMapping),
            "inject-hallucinations" => return Ok(Behavior::InjectHallucinations),
            "timeout" => return Ok(Behavior::Timeout),
            _ => {}
        }
        if let Some(p) = arg(s, "fail-rate") {
            let p: f64 = p.parse().map_err(|_| format!("bad probability `{p}`"))?;
            if !(0.0..=1.0).contains(&p) {
                return Err(format!("probability {p} outside [0, 1]"));
            }
            return Ok(Behavior::FailRate(p));
        }
        if let Some(n) = arg(s, "rate-limit") {
            return n.parse().map(Behavior::RateLimit).map_err(|_| format!("bad count `{n}`"));
        }
        Err(format!("unknown behavior `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MockScript {
    pub default: Vec<Behavior>,
    pub per_key: Vec<(String, Vec<Behavior>)>,
    pub seed: u64,
}

impl Default for MockScript {
    fn default() -> Self {
        MockScript {
            default: vec![Behavior::EchoValidMapping],
            per_key: Vec::new(),
            seed: 0,
        }
    }
}

fn parse_chain(s: &str) -> Result<Vec<Behavior>, String> {
    s.split('+').map(str::parse).collect()
}

impl MockScript {
    pub fn parse(script: &str, seed: u64) -> Result<Self, MockError> {
        let mut out = MockScript {
            seed,
            ..MockScript::default()
        };
        let err = |m: String| MockError::Script(script.to_string(), m);
        for item in script.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match item.split_once('=') {
                Some((key, chain)) => out.per_key.push((key.trim().to_string(), parse_chain(chain).map_err(err)?)),
                None => out.default = parse_chain(item).map_err(err)?,
            }
        }
        Ok(out)
    }

    /// `model@temperature` beats `model`, which beats the default.
    pub fn behaviors_for(&self, model: &str, temperature: f64) -> &[Behavior] {
        let exact = format!("{model}@{temperature}");
        self.per_key
            .iter()
            .find(|(k, _)| *k == exact)
            .or_else(|| self.per_key.iter().find(|(k, _)| k == model))
            .map_or(&self.default, |(_, b)| b)
    }
}

#[derive(Default)]
struct Counters {
    per_key: HashMap<String, u32>,
    per_body: HashMap<u64, u64>,
}

struct MockState {
    script: MockScript,
    counters: Mutex<Counters>,
}

/// Columns and candidate entries recovered from a rendered prompt.
#[derive(Debug, Default, PartialEq)]
pub struct PromptView {
    pub columns: Vec<(String, String)>,
    pub glossary: Vec<(String, String)>,
}

fn id_label(v: &Value) -> Option<(String, String)> {
    Some((v.get("id")?.as_str()?.to_string(), v.get("label")?.as_str().unwrap_or("").to_string()))
}

/// Glossary lines are single JSON objects; the batch is a single JSON array.
pub fn read_prompt(user_message: &str) -> PromptView {
    let mut view = PromptView::default();
    for line in user_message.lines().map(str::trim) {
        if line.starts_with('{') {
            if let Some(e) = serde_json::from_str::<Value>(line).ok().as_ref().and_then(id_label) {
                view.glossary.push(e);
            }
        } else if line.starts_with('[') && view.columns.is_empty() {
            if let Ok(Value::Array(items)) = serde_json::from_str::<Value>(line) {
                view.columns = items.iter().filter_map(id_label).collect();
            }
        }
    }
    view
}

fn quote(s: &str) -> String {
    if s.contains('\'') {
        serde_json::to_string(s).expect("strings serialize")
    } else {
        format!("'{s}'")
    }
}

fn answer(view: &PromptView, hallucinate: bool) -> String {
    let lines: Vec<String> = view
        .columns
        .iter()
        .map(|(col, label)| {
            let pick = view
                .glossary
                .iter()
                .find(|(_, l)| l.eq_ignore_ascii_case(label))
                .or_else(|| view.glossary.first());
            let mut ids: Vec<String> = Vec::new();
            if hallucinate {
                ids.push(format!("http://example.invalid/ontology/{}", fnv1a_64(col.as_bytes()) % 1000));
            }
            ids.extend(pick.map(|(id, _)| id.clone()));
            if hallucinate {
                ids.push("http://example.invalid/ontology/madeUp".into());
            }
            let ids: Vec<String> = ids.iter().map(|i| quote(i)).collect();
            format!("{{'colID': {}, 'propID': [{}]}}", quote(col), ids.join(", "))
        })
        .collect();
    format!("[{}]", lines.join(",\n"))
}

fn completion(model: &str, content: &str) -> Value {
    json!({
        "id": "mock-completion",
        "object": "chat.completion",
        "model": model,
        "choices": [{
            "index": 0,
            "message": {"role": "assistant", "content": content},
            "finish_reason": "stop",
        }],
    })
}

async fn chat(State(state): State<Arc<MockState>>, Json(body): Json<Value>) -> Response {
    let model = body["model"].as_str().unwrap_or("").to_string();
    let temperature = body["temperature"].as_f64().unwrap_or(0.0);
    let user = body["messages"]
        .as_array()
        .and_then(|m| m.iter().rev().find(|m| m["role"] == "user"))
        .and_then(|m| m["content"].as_str())
        .unwrap_or("");
    let behaviors = state.script.behaviors_for(&model, temperature).to_vec();
    let key = format!("{model}@{temperature}");
    let body_hash = fnv1a_64(body.to_string().as_bytes());

    let (served, occurrence) = {
        let mut c = state.counters.lock().expect("mock counters poisoned");
        let served = *c.per_key.entry(key).and_modify(|n| *n += 1).or_insert(1);
        let occ = c.per_body.entry(body_hash).and_modify(|n| *n += 1).or_insert(0);
        (served, *occ)
    };

    let mut hallucinate = false;
    for b in behaviors {
        match b {
            Behavior::RateLimit(n) if served <= n => {
                return (StatusCode::TOO_MANY_REQUESTS, "rate limited").into_response();
            }
            Behavior::RateLimit(_) => {}
            Behavior::Timeout => {
                tokio::time::sleep(Duration::from_secs(3600)).await;
            }
            Behavior::FailRate(p) => {
                let mut bytes = state.script.seed.to_le_bytes().to_vec();
                bytes.extend_from_slice(&body_hash.to_le_bytes());
                bytes.extend_from_slice(&occurrence.to_le_bytes());
                let u = (fnv1a_64(&bytes) >> 11) as f64 / (1u64 << 53) as f64;
                if u < p {
                    return Json(completion(&model, "failure")).into_response();
                }
            }
            Behavior::EchoValidMapping => hallucinate = false,
            Behavior::InjectHallucinations => hallucinate = true,
        }
    }
    let view = read_prompt(user);
    Json(completion(&model, &answer(&view, hallucinate))).into_response()
}

pub fn mock_router(script: MockScript) -> Router {
    let state = Arc::new(MockState {
        script,
        counters: Mutex::new(Counters::default()),
    });
    Router::new().route("/v1/chat/completions", post(chat)).with_state(state)
}

/// A running mock server; stopped on drop.
pub struct MockServer {
    pub addr: SocketAddr,
    handle: JoinHandle<()>,
}

impl MockServer {
    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Resolves when the server stops; normally never.
    pub async fn wait(mut self) {
        let _ = (&mut self.handle).await;
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        self.handle.abort();
    }
}

pub async fn serve_mock_llm(addr: SocketAddr, script: MockScript) -> Result<MockServer, MockError> {
    let listener = match tokio::net::TcpListener::bind(addr).await {
        Ok(l) => l,
        Err(e) if e.kind() == std::io::ErrorKind::AddrInUse => return Err(MockError::PortInUse(addr.port())),
        Err(source) => return Err(MockError::Bind { addr, source }),
    };
    let addr = listener.local_addr().map_err(|source| MockError::Bind { addr, source })?;
    let app = mock_router(script);
    let handle = tokio::spawn(async move {
        if let Err(e) = axum::serve(listener, app).await {
            tracing::error!(error = %e, "mock server stopped");
        }
    });
    tracing::info!(%addr, "mock chat endpoint listening");
    Ok(MockServer { addr, handle })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_scripts() {
        let s = MockScript::parse("echo-valid-mapping, m1=fail-rate(1.0), m2@0.5=rate-limit(2)+inject-hallucinations", 7).unwrap();
        assert_eq!(s.default, vec![Behavior::EchoValidMapping]);
        assert_eq!(s.behaviors_for("m1", 0.5), &[Behavior::FailRate(1.0)]);
        assert_eq!(
            s.behaviors_for("m2", 0.5),
            &[Behavior::RateLimit(2), Behavior::InjectHallucinations]
        );
        assert_eq!(s.behaviors_for("m2", 1.0), &[Behavior::EchoValidMapping]);
        assert!(MockScript::parse("fail-rate(2)", 0).is_err());
        assert!(MockScript::parse("dance", 0).is_err());
        assert_eq!("fail-rate(0.25)".parse::<Behavior>().unwrap().to_string(), "fail-rate(0.25)");
    }

    #[test]
    fn reads_rendered_prompt() {
        let msg = "Terms:\n{\"id\":\"g1\",\"label\":\"Year\",\"desc\":\"\"}\n{\"id\":\"g2\",\"label\":\"Name\",\"desc\":\"x\"}\n\nquery\n[{\"id\":\"c1\",\"label\":\"name\",\"table_id\":\"t\",\"table_name\":\"T\",\"table_columns\":[\"name\"]}]\nmore";
        let v = read_prompt(msg);
        assert_eq!(v.glossary.len(), 2);
        assert_eq!(v.columns, vec![("c1".to_string(), "name".to_string())]);
        assert!(answer(&v, false).contains("'colID': 'c1', 'propID': ['g2']"));
        let h = answer(&v, true);
        assert!(h.contains("example.invalid") && h.contains("'g2'"));
    }

    #[tokio::test]
    async fn port_in_use() {
        let held = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
        let addr = held.local_addr().unwrap();
        assert!(matches!(
            serve_mock_llm(addr, MockScript::default()).await,
            Err(MockError::PortInUse(p)) if p == addr.port()
        ));
    }
}
