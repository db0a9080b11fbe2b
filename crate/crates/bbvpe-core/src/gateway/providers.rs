//! HTTP adapters for hosted vision-language models.
//!
//! Two wire formats are supported: OpenAI-style chat completions and
//! Anthropic-style messages. API keys are read from an environment variable
//! named in the provider config; keys never appear in config files or logs.

use std::sync::Arc;

use base64::Engine;
use serde_json::{json, Value};

use super::{GatewayError, LvlmProvider, LvlmRequest, ProviderReply};
use crate::http::HttpJson;
use crate::raster::encode_png;

fn image_base64(req: &LvlmRequest) -> Result<String, GatewayError> {
    let png = encode_png(&req.image.raster).map_err(|e| GatewayError::Internal(e.to_string()))?;
    Ok(base64::engine::general_purpose::STANDARD.encode(png))
}

fn api_key(env_name: &str) -> Result<Option<String>, GatewayError> {
    if env_name.is_empty() {
        return Ok(None);
    }
    match std::env::var(env_name) {
        Ok(v) if !v.is_empty() => Ok(Some(v)),
        _ => Err(GatewayError::MissingApiKey { env: env_name.to_string() }),
    }
}

fn classify_status(status: u16, body: &Value) -> GatewayError {
    let message = body
        .pointer("/error/message")
        .and_then(Value::as_str)
        .unwrap_or("provider error")
        .to_string();
    // Rate limits and server errors are retryable; other client errors are not.
    let retryable = status == 429 || status >= 500;
    GatewayError::Provider { status, message, retryable }
}

/// OpenAI-style `/chat/completions` adapter.
pub struct ChatCompletionsProvider {
    pub endpoint: String,
    pub model: String,
    /// Name of the environment variable holding the bearer token; empty for
    /// unauthenticated local endpoints.
    pub api_key_env: String,
    http: Arc<dyn HttpJson>,
}

impl ChatCompletionsProvider {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>, api_key_env: impl Into<String>, http: Arc<dyn HttpJson>) -> Self {
        ChatCompletionsProvider { endpoint: endpoint.into(), model: model.into(), api_key_env: api_key_env.into(), http }
    }
}

impl LvlmProvider for ChatCompletionsProvider {
    fn complete(&self, req: &LvlmRequest) -> Result<ProviderReply, GatewayError> {
        let mut headers = Vec::new();
        if let Some(key) = api_key(&self.api_key_env)? {
            headers.push(("authorization".to_string(), format!("Bearer {key}")));
        }
        let mut body = json!({
            "model": self.model,
            "max_tokens": req.decode.max_tokens,
            "messages": [{
                "role": "user",
                "content": [
                    {"type": "text", "text": req.text},
                    {"type": "image_url", "image_url": {"url": format!("data:image/png;base64,{}", image_base64(req)?)}},
                ],
            }],
        });
        if req.decode.greedy {
            body["temperature"] = json!(0);
        }
        let reply = self.http.post_json(&self.endpoint, &headers, &body).map_err(GatewayError::from)?;
        if !reply.ok() {
            return Err(classify_status(reply.status, &reply.body));
        }
        let text = reply
            .body
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .ok_or_else(|| GatewayError::Malformed("chat completion without message content".into()))?
            .to_string();
        let token_count = reply
            .body
            .pointer("/usage/completion_tokens")
            .and_then(Value::as_u64)
            .unwrap_or_else(|| text.split_whitespace().count() as u64) as u32;
        Ok(ProviderReply { text, token_count })
    }
}

/// Anthropic-style `/messages` adapter.
pub struct MessagesProvider {
    pub endpoint: String,
    pub model: String,
    pub api_key_env: String,
    http: Arc<dyn HttpJson>,
}

impl MessagesProvider {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>, api_key_env: impl Into<String>, http: Arc<dyn HttpJson>) -> Self {
        MessagesProvider { endpoint: endpoint.into(), model: model.into(), api_key_env: api_key_env.into(), http }
    }
}

impl LvlmProvider for MessagesProvider {
    fn complete(&self, req: &LvlmRequest) -> Result<ProviderReply, GatewayError> {
        let mut headers = vec![("anthropic-version".to_string(), "2023-06-01".to_string())];
        if let Some(key) = api_key(&self.api_key_env)? {
            headers.push(("x-api-key".to_string(), key));
        }
        let mut body = json!({
            "model": self.model,
            "max_tokens": req.decode.max_tokens,
            "messages": [{
                "role": "user",
                "content": [
                    {"type": "image", "source": {"type": "base64", "media_type": "image/png", "data": image_base64(req)?}},
                    {"type": "text", "text": req.text},
                ],
            }],
        });
        if req.decode.greedy {
            body["temperature"] = json!(0);
        }
        let reply = self.http.post_json(&self.endpoint, &headers, &body).map_err(GatewayError::from)?;
        if !reply.ok() {
            return Err(classify_status(reply.status, &reply.body));
        }
        let blocks = reply
            .body
            .get("content")
            .and_then(Value::as_array)
            .ok_or_else(|| GatewayError::Malformed("messages reply without content blocks".into()))?;
        let text = blocks
            .iter()
            .find_map(|b| (b.get("type")?.as_str()? == "text").then(|| b.get("text")?.as_str().map(str::to_string))?)
            .ok_or_else(|| GatewayError::Malformed("messages reply without a text block".into()))?;
        let token_count = reply
            .body
            .pointer("/usage/output_tokens")
            .and_then(Value::as_u64)
            .unwrap_or_else(|| text.split_whitespace().count() as u64) as u32;
        Ok(ProviderReply { text, token_count })
    }
}
