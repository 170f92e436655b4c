use std::time::Duration;

use async_trait::async_trait;
use serde_json::{json, Value};

use super::{ChatRole, Provider, ProviderError, ProviderRequest};
use crate::config::RemoteProviderConfig;

pub const DEFAULT_REPLY_PATH: &str = "choices.0.message.content";

/// Generic chat-completion adapter.
///
/// POSTs `{"model", "messages": [{"role", "content"}]}` to `base_url` and
/// reads the reply text at `reply_path`. The bearer token comes from the
/// environment variable named in the config; when that variable is unset no
/// `Authorization` header is sent.
pub struct RemoteProvider {
    config: RemoteProviderConfig,
    reply_path: Vec<String>,
    client: reqwest::Client,
}

impl RemoteProvider {
    pub fn new(config: RemoteProviderConfig) -> Self {
        let reply_path = config
            .reply_path
            .as_deref()
            .unwrap_or(DEFAULT_REPLY_PATH)
            .split('.')
            .map(str::to_owned)
            .collect();
        Self {
            config,
            reply_path,
            client: reqwest::Client::new(),
        }
    }

    pub fn request_body(&self, request: &ProviderRequest) -> Value {
        let messages: Vec<Value> = request
            .messages
            .iter()
            .map(|m| {
                let role = match m.role {
                    ChatRole::System => "system",
                    ChatRole::User => "user",
                    ChatRole::Assistant => "assistant",
                };
                json!({ "role": role, "content": m.text })
            })
            .collect();
        json!({ "model": self.config.model_name, "messages": messages })
    }

    fn upstream_error(&self, message: impl Into<String>) -> ProviderError {
        ProviderError::UpstreamError {
            provider_id: self.config.id.clone(),
            message: message.into(),
        }
    }

    fn timeout(&self) -> ProviderError {
        ProviderError::UpstreamTimeout {
            provider_id: self.config.id.clone(),
            timeout_ms: self.config.timeout_ms,
        }
    }
}

/// Walks a dotted path; numeric segments index arrays.
pub(crate) fn extract_text<'a>(body: &'a Value, path: &[String]) -> Option<&'a str> {
    let mut cur = body;
    for seg in path {
        cur = match cur {
            Value::Array(items) => items.get(seg.parse::<usize>().ok()?)?,
            Value::Object(map) => map.get(seg)?,
            _ => return None,
        };
    }
    cur.as_str()
}

#[async_trait]
impl Provider for RemoteProvider {
    async fn generate(&self, request: &ProviderRequest) -> Result<String, ProviderError> {
        let mut builder = self
            .client
            .post(&self.config.base_url)
            .timeout(Duration::from_millis(self.config.timeout_ms))
            .json(&self.request_body(request));
        if let Some(token) = std::env::var(&self.config.api_key_env)
            .ok()
            .filter(|t| !t.is_empty())
        {
            builder = builder.bearer_auth(token);
        }

        let response = builder.send().await.map_err(|e| {
            if e.is_timeout() {
                self.timeout()
            } else {
                self.upstream_error(e.to_string())
            }
        })?;
        let status = response.status();
        let body = response.text().await.map_err(|e| {
            if e.is_timeout() {
                self.timeout()
            } else {
                self.upstream_error(e.to_string())
            }
        })?;
        if !status.is_success() {
            let snippet: String = body.chars().take(200).collect();
            return Err(self.upstream_error(format!("status {status}: {snippet}")));
        }
        let value: Value = serde_json::from_str(&body)
            .map_err(|e| self.upstream_error(format!("malformed response body: {e}")))?;
        extract_text(&value, &self.reply_path)
            .map(str::to_owned)
            .ok_or_else(|| {
                self.upstream_error(format!("no reply text at `{}`", self.reply_path.join(".")))
            })
    }
}
