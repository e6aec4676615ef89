//! Prompt-in, text-out access to chat models.
//!
//! A [`ModelHandle`] names a model and how to reach it: a live HTTP endpoint,
//! a scripted responder for tests, or a recorded transcript. All calls go
//! through a [`Gateway`], which owns the retry budget, the per-endpoint
//! in-flight bound and the optional transcript recorder.

mod live;
pub mod mock;
mod transcript;

pub use live::{request_body, request_url, Dialect};
pub use transcript::{read_transcript, ReplayLog, TranscriptEntry, TranscriptRecorder, TRANSCRIPT_SCHEMA_VERSION};

use serde_json::Value;
use std::collections::{BTreeMap, HashMap, VecDeque};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};
use tokio::sync::Semaphore;
use url::Url;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GatewayError {
    #[error("prompt is empty")]
    EmptyPrompt,
    #[error("request timed out after {0:?}")]
    Timeout(Duration),
    #[error("transport error (status {status:?}): {message}")]
    Transport { status: Option<u16>, message: String },
    #[error("gave up after {attempts} attempts: {last}")]
    RetriesExhausted { attempts: u32, last: Box<GatewayError> },
    #[error("script for `{0}` is exhausted")]
    ScriptExhausted(String),
    #[error("replay mismatch for `{model}` at entry {position}")]
    ReplayMismatch { model: String, position: usize },
    #[error("no recorded response left for `{0}`")]
    ReplayExhausted(String),
    #[error("transcript error: {0}")]
    Transcript(String),
    #[error("model `{0}` has no endpoint")]
    MissingEndpoint(String),
}

impl GatewayError {
    fn is_transient(&self) -> bool {
        match self {
            GatewayError::Timeout(_) => true,
            GatewayError::Transport { status: None, .. } => true,
            GatewayError::Transport {
                status: Some(s), ..
            } => *s == 429 || *s >= 500,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Live,
    Scripted,
    Replay,
}

type ResponderFn = dyn Fn(&str) -> String + Send + Sync;

enum Backend {
    Live {
        client: reqwest::Client,
        remote_model: String,
        dialect: Dialect,
    },
    Queue(Mutex<VecDeque<String>>),
    Function(Box<ResponderFn>),
    Replay(Arc<ReplayLog>),
}

/// A named model and the means of reaching it. Cheap to clone; clones share state.
#[derive(Clone)]
pub struct ModelHandle {
    pub name: String,
    pub endpoint: Option<Url>,
    pub kind: ModelKind,
    /// Sampling parameters forwarded verbatim. Empty means server defaults.
    pub inference_params: BTreeMap<String, Value>,
    backend: Arc<Backend>,
}

impl std::fmt::Debug for ModelHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ModelHandle")
            .field("name", &self.name)
            .field("endpoint", &self.endpoint.as_ref().map(Url::as_str))
            .field("kind", &self.kind)
            .field("inference_params", &self.inference_params)
            .finish()
    }
}

impl ModelHandle {
    /// A model served over HTTP. `remote_model` is the name the server knows it by.
    pub fn live(
        name: impl Into<String>,
        remote_model: impl Into<String>,
        endpoint: Url,
        dialect: Dialect,
        inference_params: BTreeMap<String, Value>,
    ) -> ModelHandle {
        ModelHandle {
            name: name.into(),
            endpoint: Some(endpoint),
            kind: ModelKind::Live,
            inference_params,
            backend: Arc::new(Backend::Live {
                client: reqwest::Client::new(),
                remote_model: remote_model.into(),
                dialect,
            }),
        }
    }

    /// Returns `responses` in order, then fails with `ScriptExhausted`.
    pub fn scripted<I, S>(name: impl Into<String>, responses: I) -> ModelHandle
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        ModelHandle {
            name: name.into(),
            endpoint: None,
            kind: ModelKind::Scripted,
            inference_params: BTreeMap::new(),
            backend: Arc::new(Backend::Queue(Mutex::new(
                responses.into_iter().map(Into::into).collect(),
            ))),
        }
    }

    /// Answers every prompt with `f(prompt)`. Order-independent, so safe under concurrency.
    pub fn from_fn<F>(name: impl Into<String>, f: F) -> ModelHandle
    where
        F: Fn(&str) -> String + Send + Sync + 'static,
    {
        ModelHandle {
            name: name.into(),
            endpoint: None,
            kind: ModelKind::Scripted,
            inference_params: BTreeMap::new(),
            backend: Arc::new(Backend::Function(Box::new(f))),
        }
    }

    /// Serves responses recorded under this model's name.
    pub fn replay(name: impl Into<String>, log: Arc<ReplayLog>) -> ModelHandle {
        ModelHandle {
            name: name.into(),
            endpoint: None,
            kind: ModelKind::Replay,
            inference_params: BTreeMap::new(),
            backend: Arc::new(Backend::Replay(log)),
        }
    }

    /// Name the serving endpoint knows this model by.
    pub fn remote_model(&self) -> &str {
        match &*self.backend {
            Backend::Live { remote_model, .. } => remote_model,
            _ => &self.name,
        }
    }
}

/// Per-call reliability settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryBudget {
    pub timeout: Duration,
    /// Total attempts including the first.
    pub max_attempts: u32,
    pub initial_backoff: Duration,
}

impl Default for RetryBudget {
    fn default() -> Self {
        RetryBudget {
            timeout: Duration::from_secs(300),
            max_attempts: 3,
            initial_backoff: Duration::from_secs(1),
        }
    }
}

type RequestHook = dyn Fn(&Url, &Value) + Send + Sync;

#[derive(Debug, Clone, Default, serde::Serialize, serde::Deserialize, PartialEq)]
pub struct GatewayStats {
    pub calls: u64,
    pub failures: u64,
    pub retries: u64,
}

pub struct Gateway {
    budget: RetryBudget,
    max_in_flight: usize,
    limits: Mutex<HashMap<String, Arc<Semaphore>>>,
    recorder: Option<Arc<TranscriptRecorder>>,
    request_hook: Option<Box<RequestHook>>,
    stats: Mutex<GatewayStats>,
}

impl Default for Gateway {
    fn default() -> Self {
        Gateway::new(RetryBudget::default(), 4)
    }
}

impl Gateway {
    pub fn new(budget: RetryBudget, max_in_flight: usize) -> Gateway {
        Gateway {
            budget,
            max_in_flight: max_in_flight.max(1),
            limits: Mutex::new(HashMap::new()),
            recorder: None,
            request_hook: None,
            stats: Mutex::new(GatewayStats::default()),
        }
    }

    pub fn with_recorder(mut self, recorder: Arc<TranscriptRecorder>) -> Gateway {
        self.recorder = Some(recorder);
        self
    }

    /// Observe every live request body before it is sent.
    pub fn with_request_hook<F>(mut self, hook: F) -> Gateway
    where
        F: Fn(&Url, &Value) + Send + Sync + 'static,
    {
        self.request_hook = Some(Box::new(hook));
        self
    }

    pub fn budget(&self) -> RetryBudget {
        self.budget
    }

    pub fn stats(&self) -> GatewayStats {
        self.stats.lock().unwrap().clone()
    }

    pub async fn complete(&self, model: &ModelHandle, prompt: &str) -> Result<String, GatewayError> {
        self.complete_with(model, prompt, self.budget).await
    }

    pub async fn complete_with(
        &self,
        model: &ModelHandle,
        prompt: &str,
        budget: RetryBudget,
    ) -> Result<String, GatewayError> {
        if prompt.trim().is_empty() {
            return Err(GatewayError::EmptyPrompt);
        }
        let started = Instant::now();
        let chrono_started = chrono::Utc::now();
        let result = match &*model.backend {
            Backend::Queue(queue) => queue
                .lock()
                .unwrap()
                .pop_front()
                .ok_or_else(|| GatewayError::ScriptExhausted(model.name.clone())),
            Backend::Function(f) => Ok(f(prompt)),
            Backend::Replay(log) => log.next(&model.name, prompt),
            Backend::Live {
                client,
                remote_model,
                dialect,
            } => {
                self.complete_live(model, client, remote_model, *dialect, prompt, budget)
                    .await
            }
        };
        {
            let mut stats = self.stats.lock().unwrap();
            stats.calls += 1;
            if result.is_err() {
                stats.failures += 1;
            }
        }
        if let (Ok(response), Some(recorder)) = (&result, &self.recorder) {
            recorder
                .append(&TranscriptEntry {
                    schema_version: TRANSCRIPT_SCHEMA_VERSION,
                    model: model.name.clone(),
                    prompt: prompt.to_string(),
                    response: response.clone(),
                    timestamp: chrono_started,
                    latency_ms: started.elapsed().as_millis() as u64,
                })
                .map_err(|e| GatewayError::Transcript(e.to_string()))?;
        }
        result
    }

    fn limiter(&self, endpoint: &Url) -> Arc<Semaphore> {
        let mut limits = self.limits.lock().unwrap();
        limits
            .entry(endpoint.origin().ascii_serialization())
            .or_insert_with(|| Arc::new(Semaphore::new(self.max_in_flight)))
            .clone()
    }

    async fn complete_live(
        &self,
        model: &ModelHandle,
        client: &reqwest::Client,
        remote_model: &str,
        dialect: Dialect,
        prompt: &str,
        budget: RetryBudget,
    ) -> Result<String, GatewayError> {
        let endpoint = model
            .endpoint
            .as_ref()
            .ok_or_else(|| GatewayError::MissingEndpoint(model.name.clone()))?;
        let url = request_url(endpoint, dialect);
        let body = request_body(dialect, remote_model, prompt, &model.inference_params);
        if let Some(hook) = &self.request_hook {
            hook(&url, &body);
        }
        let limiter = self.limiter(endpoint);
        let attempts = budget.max_attempts.max(1);
        let mut backoff = budget.initial_backoff;
        let mut attempt = 1;
        loop {
            let outcome = {
                let _permit = limiter.acquire().await.expect("semaphore never closed");
                live::send(client, &url, &body, dialect, budget.timeout).await
            };
            match outcome {
                Ok(text) => return Ok(text),
                Err(err) if err.is_transient() && attempt < attempts => {
                    tracing::warn!(model = %model.name, attempt, error = %err, "retrying");
                    self.stats.lock().unwrap().retries += 1;
                    tokio::time::sleep(backoff).await;
                    backoff *= 2;
                    attempt += 1;
                }
                Err(err) if err.is_transient() && attempts > 1 => {
                    return Err(GatewayError::RetriesExhausted {
                        attempts,
                        last: Box::new(err),
                    })
                }
                Err(err) => return Err(err),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[tokio::test]
    async fn scripted_passthrough() {
        let gw = Gateway::default();
        let m = ModelHandle::scripted("w", ["hello"]);
        assert_eq!(gw.complete(&m, "anything").await.unwrap(), "hello");
    }

    #[tokio::test]
    async fn scripted_exhaustion() {
        let gw = Gateway::default();
        let m = ModelHandle::scripted("w", ["a", "b"]);
        assert_eq!(gw.complete(&m, "p").await.unwrap(), "a");
        assert_eq!(gw.complete(&m, "p").await.unwrap(), "b");
        assert_eq!(
            gw.complete(&m, "p").await,
            Err(GatewayError::ScriptExhausted("w".into()))
        );
        assert_eq!(gw.stats().failures, 1);
    }

    #[tokio::test]
    async fn empty_prompt_rejected() {
        let gw = Gateway::default();
        let m = ModelHandle::scripted("w", ["a"]);
        assert_eq!(gw.complete(&m, "  ").await, Err(GatewayError::EmptyPrompt));
    }

    #[tokio::test]
    async fn function_responder_sees_prompt() {
        let gw = Gateway::default();
        let m = ModelHandle::from_fn("echo", |p| p.to_uppercase());
        assert_eq!(gw.complete(&m, "abc").await.unwrap(), "ABC");
        assert_eq!(m.kind, ModelKind::Scripted);
    }

    #[test]
    fn transient_classification() {
        let t = |s| GatewayError::Transport {
            status: Some(s),
            message: String::new(),
        };
        assert!(t(503).is_transient());
        assert!(t(429).is_transient());
        assert!(!t(404).is_transient());
        assert!(GatewayError::Timeout(Duration::from_secs(1)).is_transient());
        assert!(!GatewayError::EmptyPrompt.is_transient());
    }
}
