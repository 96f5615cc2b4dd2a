//! Chat-completion client for OpenAI-compatible endpoints.

use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use super::provider::{ProviderError, TextProvider, TextRequest};
use super::EnhanceError;

pub const DEFAULT_KEY_ENV: &str = "IDGUIDE_API_KEY";

/// Endpoint settings. The API key is read from `api_key_env` and never stored here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpProviderConfig {
    pub endpoint: String,
    pub model: String,
    #[serde(default = "default_timeout")]
    pub timeout_ms: u64,
    #[serde(default = "default_key_env")]
    pub api_key_env: String,
    /// Extra request fields (temperature, top_p, ...) passed through untouched.
    #[serde(default)]
    pub params: Map<String, Value>,
}

fn default_timeout() -> u64 {
    60_000
}

fn default_key_env() -> String {
    DEFAULT_KEY_ENV.into()
}

pub struct HttpTextProvider {
    config: HttpProviderConfig,
    api_key: String,
    client: reqwest::blocking::Client,
}

impl HttpTextProvider {
    pub fn from_env(config: HttpProviderConfig) -> Result<Self, EnhanceError> {
        let api_key = std::env::var(&config.api_key_env)
            .map_err(|_| EnhanceError::Config(format!("environment variable {} is not set", config.api_key_env)))?;
        Self::with_key(config, api_key)
    }

    pub fn with_key(config: HttpProviderConfig, api_key: String) -> Result<Self, EnhanceError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(config.timeout_ms))
            .build()
            .map_err(|e| EnhanceError::Config(format!("http client: {e}")))?;
        Ok(Self { config, api_key, client })
    }

    pub fn request_body(&self, request: &TextRequest<'_>) -> Result<Value, ProviderError> {
        let mut content = vec![json!({"type": "text", "text": request.instruction})];
        if let Some(image) = request.image {
            let bytes = std::fs::read(&image.path)
                .map_err(|e| ProviderError::fatal(format!("read {}: {e}", image.path.display())))?;
            let mime = match image.path.extension().and_then(|e| e.to_str()) {
                Some("jpg" | "jpeg") => "image/jpeg",
                Some("webp") => "image/webp",
                _ => "image/png",
            };
            let data = base64::engine::general_purpose::STANDARD.encode(bytes);
            content.push(json!({"type": "image_url", "image_url": {"url": format!("data:{mime};base64,{data}")}}));
        }
        let mut body = Map::new();
        body.insert("model".into(), Value::String(self.config.model.clone()));
        body.insert("messages".into(), json!([{"role": "user", "content": content}]));
        for (k, v) in &self.config.params {
            body.insert(k.clone(), v.clone());
        }
        Ok(Value::Object(body))
    }
}

impl TextProvider for HttpTextProvider {
    fn name(&self) -> &str {
        &self.config.model
    }

    fn complete(&self, request: &TextRequest<'_>) -> Result<String, ProviderError> {
        let body = self.request_body(request)?;
        let resp = self
            .client
            .post(&self.config.endpoint)
            .bearer_auth(&self.api_key)
            .json(&body)
            .send()
            .map_err(|e| ProviderError::transient(format!("request failed: {e}")))?;
        let status = resp.status();
        let text = resp
            .text()
            .map_err(|e| ProviderError::transient(format!("reading response: {e}")))?;
        if !status.is_success() {
            let msg = format!("http {status}: {}", text.chars().take(200).collect::<String>());
            return Err(if status.is_server_error() || status.as_u16() == 429 {
                ProviderError::transient(msg)
            } else {
                ProviderError::fatal(msg)
            });
        }
        let v: Value = serde_json::from_str(&text)
            .map_err(|e| ProviderError::transient(format!("malformed response: {e}")))?;
        let content = v
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .ok_or_else(|| ProviderError::transient("response carries no message content"))?;
        Ok(content.to_owned())
    }
}
