//! Adapter for tools served as remote HTTP services.
//!
//! Heavy models (image analysis, imaging QA) live behind this bridge: the
//! engine POSTs `{"query": payload}` to the descriptor's endpoint and the
//! service replies `{"result": "..."}`. The adapter stays model-agnostic;
//! everything specific lives on the remote side.

use std::time::Duration;

use orchestra_core::engine::{ToolAgent, ToolError};
use orchestra_core::netguard;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ExternalError {
    #[error("external tool timed out after {0:?}")]
    Timeout(Duration),
    #[error("external tool returned HTTP {status}: {body}")]
    RemoteError { status: u16, body: String },
    #[error("transport: {0}")]
    Transport(String),
}

#[derive(Serialize)]
struct WireQuery<'a> {
    query: &'a str,
}

#[derive(Deserialize)]
struct WireResult {
    result: String,
}

/// One external tool endpoint.
pub struct ExternalAgent {
    endpoint: String,
    timeout: Duration,
    client: reqwest::blocking::Client,
}

impl ExternalAgent {
    pub fn new(endpoint: impl Into<String>, timeout: Duration) -> Self {
        Self {
            endpoint: endpoint.into(),
            timeout,
            client: reqwest::blocking::Client::builder()
                .timeout(timeout)
                .build()
                .expect("reqwest client"),
        }
    }

    pub fn invoke_remote(&self, payload: &str) -> Result<String, ExternalError> {
        netguard::record_outbound();
        let response = self
            .client
            .post(&self.endpoint)
            .json(&WireQuery { query: payload })
            .send()
            .map_err(|e| {
                if e.is_timeout() {
                    ExternalError::Timeout(self.timeout)
                } else {
                    ExternalError::Transport(e.to_string())
                }
            })?;
        let status = response.status();
        if !status.is_success() {
            let body = response.text().unwrap_or_default();
            return Err(ExternalError::RemoteError {
                status: status.as_u16(),
                body: body.chars().take(300).collect(),
            });
        }
        let wire: WireResult = response
            .json()
            .map_err(|e| ExternalError::Transport(format!("bad response body: {e}")))?;
        Ok(wire.result)
    }
}

impl ToolAgent for ExternalAgent {
    fn invoke(&self, payload: &str) -> Result<String, ToolError> {
        self.invoke_remote(payload).map_err(|e| ToolError(e.to_string()))
    }
}
