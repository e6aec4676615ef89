use super::GatewayError;
use serde_json::{json, Map, Value};
use std::collections::BTreeMap;
use std::time::Duration;
use url::Url;

/// JSON wire dialect of the serving endpoint.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dialect {
    /// `POST /api/chat` with `{"model", "messages", "stream": false, "options"}`.
    #[default]
    Ollama,
    /// `POST /v1/chat/completions`, sampling parameters at the top level.
    OpenAi,
}

impl std::str::FromStr for Dialect {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ollama" => Ok(Dialect::Ollama),
            "openai" | "open_ai" => Ok(Dialect::OpenAi),
            other => Err(format!("unknown dialect `{other}`")),
        }
    }
}

pub fn request_url(endpoint: &Url, dialect: Dialect) -> Url {
    let base = endpoint.as_str().trim_end_matches('/');
    let path = match dialect {
        Dialect::Ollama => "api/chat",
        Dialect::OpenAi => "v1/chat/completions",
    };
    Url::parse(&format!("{base}/{path}")).expect("endpoint with appended path stays valid")
}

/// One user message, no history. Sampling fields appear only when `params` is non-empty.
pub fn request_body(
    dialect: Dialect,
    model: &str,
    prompt: &str,
    params: &BTreeMap<String, Value>,
) -> Value {
    let mut body = Map::new();
    body.insert("model".into(), json!(model));
    body.insert(
        "messages".into(),
        json!([{ "role": "user", "content": prompt }]),
    );
    body.insert("stream".into(), json!(false));
    if !params.is_empty() {
        match dialect {
            Dialect::Ollama => {
                body.insert(
                    "options".into(),
                    Value::Object(params.clone().into_iter().collect()),
                );
            }
            Dialect::OpenAi => {
                for (k, v) in params {
                    body.insert(k.clone(), v.clone());
                }
            }
        }
    }
    Value::Object(body)
}

fn extract_text(dialect: Dialect, body: &Value) -> Option<String> {
    let text = match dialect {
        Dialect::Ollama => body.pointer("/message/content").or_else(|| body.get("response")),
        Dialect::OpenAi => body.pointer("/choices/0/message/content"),
    };
    text.and_then(Value::as_str).map(str::to_string)
}

pub(super) async fn send(
    client: &reqwest::Client,
    url: &Url,
    body: &Value,
    dialect: Dialect,
    timeout: Duration,
) -> Result<String, GatewayError> {
    let response = client
        .post(url.clone())
        .timeout(timeout)
        .json(body)
        .send()
        .await
        .map_err(|e| classify(e, timeout))?;
    let status = response.status();
    if !status.is_success() {
        let message = response.text().await.unwrap_or_default();
        return Err(GatewayError::Transport {
            status: Some(status.as_u16()),
            message,
        });
    }
    let payload: Value = response.json().await.map_err(|e| classify(e, timeout))?;
    extract_text(dialect, &payload).ok_or_else(|| GatewayError::Transport {
        status: Some(status.as_u16()),
        message: "response carries no message content".into(),
    })
}

fn classify(err: reqwest::Error, timeout: Duration) -> GatewayError {
    if err.is_timeout() {
        GatewayError::Timeout(timeout)
    } else {
        GatewayError::Transport {
            status: err.status().map(|s| s.as_u16()),
            message: err.to_string(),
        }
    }
}
