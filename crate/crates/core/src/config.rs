//! Runtime configuration: where models live and how to reach them.
//!
//! ```toml
//! [gateway]
//! endpoint = "http://localhost:11434"
//! dialect = "ollama"          # or "openai"
//! timeout_secs = 300
//! max_attempts = 3
//! max_in_flight = 4
//! templates_dir = "prompts/"  # optional; built-in templates otherwise
//! record = "transcript.jsonl" # optional
//!
//! [models."gemma2:2b"]
//! kind = "live"               # live | mock | replay
//! params = { temperature = 0.7 }
//! ```
//!
//! `FABLELOOP_ENDPOINT` and `FABLELOOP_DIALECT` override the gateway table.
//! Relative paths are resolved against the directory of the config file.
//! A model name with no `[models]` entry resolves to a live model of that
//! name at the default endpoint, or to the replay log when one is configured.
//! Names starting with `mock:` resolve to the built-in mock model.

use crate::gateway::{
    mock::mock_model, Dialect, Gateway, GatewayError, ModelHandle, ReplayLog, RetryBudget,
    TranscriptRecorder,
};
use crate::engine::Engine;
use crate::prompts::{PromptForge, TemplateError};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;
use url::Url;

pub const ENV_ENDPOINT: &str = "FABLELOOP_ENDPOINT";
pub const ENV_DIALECT: &str = "FABLELOOP_DIALECT";
pub const MOCK_PREFIX: &str = "mock:";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid endpoint `{0}`")]
    Endpoint(String),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatewaySettings {
    pub endpoint: String,
    pub dialect: Dialect,
    pub timeout_secs: u64,
    pub max_attempts: u32,
    pub initial_backoff_ms: u64,
    pub max_in_flight: usize,
    pub templates_dir: Option<PathBuf>,
    /// Append every completed call to this transcript.
    pub record: Option<PathBuf>,
    /// Serve unlisted models from this transcript instead of the network.
    pub replay: Option<PathBuf>,
    pub replay_strict: bool,
}

impl Default for GatewaySettings {
    fn default() -> Self {
        let budget = RetryBudget::default();
        GatewaySettings {
            endpoint: "http://localhost:11434".into(),
            dialect: Dialect::Ollama,
            timeout_secs: budget.timeout.as_secs(),
            max_attempts: budget.max_attempts,
            initial_backoff_ms: budget.initial_backoff.as_millis() as u64,
            max_in_flight: 4,
            templates_dir: None,
            record: None,
            replay: None,
            replay_strict: false,
        }
    }
}

impl GatewaySettings {
    pub fn budget(&self) -> RetryBudget {
        RetryBudget {
            timeout: Duration::from_secs(self.timeout_secs),
            max_attempts: self.max_attempts.max(1),
            initial_backoff: Duration::from_millis(self.initial_backoff_ms),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelSource {
    #[default]
    Live,
    Mock,
    Replay,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelSource,
    /// Name on the server; defaults to the table key.
    pub remote: Option<String>,
    pub endpoint: Option<String>,
    pub dialect: Option<Dialect>,
    pub params: BTreeMap<String, Value>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AppConfig {
    pub gateway: GatewaySettings,
    pub models: BTreeMap<String, ModelSpec>,
}

fn resolve_path(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

impl AppConfig {
    /// Parses the `[gateway]` and `[models]` tables; other top-level keys are ignored.
    pub fn from_toml(text: &str) -> Result<AppConfig, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<AppConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let mut config = AppConfig::from_toml(&text)?;
        config.resolve_relative_to(path.parent().unwrap_or(Path::new(".")));
        Ok(config)
    }

    pub fn resolve_relative_to(&mut self, base: &Path) {
        resolve_path(base, &mut self.gateway.templates_dir);
        resolve_path(base, &mut self.gateway.record);
        resolve_path(base, &mut self.gateway.replay);
    }

    /// Applies environment overrides through `get` (normally `std::env::var`).
    pub fn apply_env<F>(&mut self, get: F) -> Result<(), ConfigError>
    where
        F: Fn(&str) -> Option<String>,
    {
        if let Some(endpoint) = get(ENV_ENDPOINT).filter(|s| !s.is_empty()) {
            self.gateway.endpoint = endpoint;
        }
        if let Some(dialect) = get(ENV_DIALECT).filter(|s| !s.is_empty()) {
            self.gateway.dialect = dialect.parse().map_err(ConfigError::Invalid)?;
        }
        Ok(())
    }

    pub fn with_process_env(mut self) -> Result<AppConfig, ConfigError> {
        self.apply_env(|k| std::env::var(k).ok())?;
        Ok(self)
    }
}

fn parse_endpoint(s: &str) -> Result<Url, ConfigError> {
    let url = Url::parse(s).map_err(|_| ConfigError::Endpoint(s.to_string()))?;
    if !matches!(url.scheme(), "http" | "https") || url.host().is_none() {
        return Err(ConfigError::Endpoint(s.to_string()));
    }
    Ok(url)
}

/// Shared gateway, templates and model resolution built from an [`AppConfig`].
#[derive(Clone)]
pub struct Runtime {
    pub config: AppConfig,
    pub gateway: Arc<Gateway>,
    pub forge: Arc<PromptForge>,
    replay: Option<Arc<ReplayLog>>,
}

impl Runtime {
    pub fn build(config: AppConfig) -> Result<Runtime, ConfigError> {
        parse_endpoint(&config.gateway.endpoint)?;
        let forge = match &config.gateway.templates_dir {
            Some(dir) => PromptForge::load_dir(dir)?,
            None => PromptForge::builtin(),
        };
        let mut gateway = Gateway::new(config.gateway.budget(), config.gateway.max_in_flight);
        if let Some(path) = &config.gateway.record {
            let recorder = TranscriptRecorder::open(path).map_err(|e| ConfigError::Io {
                path: path.clone(),
                message: e.to_string(),
            })?;
            gateway = gateway.with_recorder(Arc::new(recorder));
        }
        let replay = match &config.gateway.replay {
            Some(path) => Some(Arc::new(ReplayLog::load(path, config.gateway.replay_strict)?)),
            None => None,
        };
        Ok(Runtime {
            config,
            gateway: Arc::new(gateway),
            forge: Arc::new(forge),
            replay,
        })
    }

    /// Builds with a caller-supplied gateway, e.g. one with a request hook.
    pub fn with_gateway(mut self, gateway: Gateway) -> Runtime {
        self.gateway = Arc::new(gateway);
        self
    }

    pub fn engine(&self) -> Engine {
        Engine::new(self.gateway.clone(), self.forge.clone())
    }

    pub fn resolve(&self, name: &str) -> Result<ModelHandle, ConfigError> {
        if name.trim().is_empty() {
            return Err(ConfigError::Invalid("empty model name".into()));
        }
        let spec = match self.config.models.get(name) {
            Some(spec) => spec.clone(),
            None if name.starts_with(MOCK_PREFIX) => ModelSpec {
                kind: ModelSource::Mock,
                ..ModelSpec::default()
            },
            None if self.replay.is_some() => ModelSpec {
                kind: ModelSource::Replay,
                ..ModelSpec::default()
            },
            None => ModelSpec::default(),
        };
        match spec.kind {
            ModelSource::Mock => Ok(mock_model(name)),
            ModelSource::Replay => {
                let log = self.replay.clone().ok_or_else(|| {
                    ConfigError::Invalid(format!("model `{name}` wants replay but no [gateway] replay file is set"))
                })?;
                Ok(ModelHandle::replay(name, log))
            }
            ModelSource::Live => {
                let endpoint = parse_endpoint(spec.endpoint.as_deref().unwrap_or(&self.config.gateway.endpoint))?;
                Ok(ModelHandle::live(
                    name,
                    spec.remote.unwrap_or_else(|| name.to_string()),
                    endpoint,
                    spec.dialect.unwrap_or(self.config.gateway.dialect),
                    spec.params,
                ))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::ModelKind;

    #[test]
    fn defaults_and_overrides() {
        let mut c = AppConfig::from_toml("").unwrap();
        assert_eq!(c.gateway.endpoint, "http://localhost:11434");
        assert_eq!(c.gateway.budget(), RetryBudget::default());
        c.apply_env(|k| match k {
            ENV_ENDPOINT => Some("http://gpu-box:8000".into()),
            ENV_DIALECT => Some("openai".into()),
            _ => None,
        })
        .unwrap();
        assert_eq!(c.gateway.endpoint, "http://gpu-box:8000");
        assert_eq!(c.gateway.dialect, Dialect::OpenAi);
        assert!(c.apply_env(|k| (k == ENV_DIALECT).then(|| "grpc".into())).is_err());
    }

    #[test]
    fn resolves_models() {
        let c = AppConfig::from_toml(
            r#"
            writer = "ignored top-level key"
            [gateway]
            endpoint = "http://host:1234"
            [models.small]
            remote = "gemma2:2b"
            params = { temperature = 0.2 }
            [models.fake]
            kind = "mock"
            "#,
        )
        .unwrap();
        let rt = Runtime::build(c).unwrap();
        let small = rt.resolve("small").unwrap();
        assert_eq!(small.kind, ModelKind::Live);
        assert_eq!(small.remote_model(), "gemma2:2b");
        assert_eq!(small.endpoint.as_ref().unwrap().as_str(), "http://host:1234/");
        assert_eq!(small.inference_params["temperature"], 0.2);
        assert_eq!(rt.resolve("fake").unwrap().kind, ModelKind::Scripted);
        assert_eq!(rt.resolve("mock:any").unwrap().kind, ModelKind::Scripted);
        let other = rt.resolve("llama3:8b").unwrap();
        assert!(other.inference_params.is_empty());
        assert!(rt.resolve(" ").is_err());
    }

    #[test]
    fn bad_endpoint_rejected() {
        let c = AppConfig::from_toml("[gateway]\nendpoint = \"not a url\"").unwrap();
        assert!(matches!(Runtime::build(c), Err(ConfigError::Endpoint(_))));
        assert!(AppConfig::from_toml("[gateway]\nbogus = 1").is_err());
    }

    #[test]
    fn replay_without_file_is_an_error() {
        let c = AppConfig::from_toml("[models.r]\nkind = \"replay\"").unwrap();
        let rt = Runtime::build(c).unwrap();
        assert!(matches!(rt.resolve("r"), Err(ConfigError::Invalid(_))));
    }
}
