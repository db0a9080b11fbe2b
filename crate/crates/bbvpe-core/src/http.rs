//! Minimal JSON-over-HTTP client abstraction.
//!
//! Everything that talks to a network endpoint (model providers, the object
//! localization service, the feature embedding service) goes through
//! [`HttpJson`], so tests can inject in-process fakes and never open sockets.

use std::time::Duration;

use serde_json::Value;

#[derive(Debug, thiserror::Error)]
pub enum HttpError {
    #[error("transport: {0}")]
    Transport(String),
    #[error("invalid response body: {0}")]
    Body(String),
}

/// Status code plus parsed JSON body. Non-2xx statuses are returned, not
/// raised; callers decide what is retryable.
#[derive(Debug, Clone)]
pub struct HttpReply {
    pub status: u16,
    pub body: Value,
}

impl HttpReply {
    pub fn ok(&self) -> bool {
        (200..300).contains(&self.status)
    }
}

pub trait HttpJson: Send + Sync {
    fn post_json(&self, url: &str, headers: &[(String, String)], body: &Value) -> Result<HttpReply, HttpError>;

    fn post_bytes(
        &self,
        url: &str,
        headers: &[(String, String)],
        content_type: &str,
        body: &[u8],
    ) -> Result<HttpReply, HttpError>;
}

/// Blocking client backed by `ureq`.
pub struct UreqHttp {
    agent: ureq::Agent,
}

impl UreqHttp {
    pub fn new(timeout: Duration) -> Self {
        let config = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(timeout))
            .build();
        UreqHttp { agent: ureq::Agent::new_with_config(config) }
    }

    fn finish(mut resp: ureq::http::Response<ureq::Body>) -> Result<HttpReply, HttpError> {
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(|e| HttpError::Transport(e.to_string()))?;
        let body: Value = if text.trim().is_empty() {
            Value::Null
        } else {
            serde_json::from_str(&text).map_err(|e| HttpError::Body(format!("{e}: {}", &text[..text.len().min(200)])))?
        };
        Ok(HttpReply { status, body })
    }
}

impl HttpJson for UreqHttp {
    fn post_json(&self, url: &str, headers: &[(String, String)], body: &Value) -> Result<HttpReply, HttpError> {
        let mut req = self.agent.post(url);
        for (k, v) in headers {
            req = req.header(k.as_str(), v.as_str());
        }
        let resp = req.send_json(body).map_err(|e| HttpError::Transport(e.to_string()))?;
        Self::finish(resp)
    }

    fn post_bytes(
        &self,
        url: &str,
        headers: &[(String, String)],
        content_type: &str,
        body: &[u8],
    ) -> Result<HttpReply, HttpError> {
        let mut req = self.agent.post(url).header("content-type", content_type);
        for (k, v) in headers {
            req = req.header(k.as_str(), v.as_str());
        }
        let resp = req.send(body).map_err(|e| HttpError::Transport(e.to_string()))?;
        Self::finish(resp)
    }
}
