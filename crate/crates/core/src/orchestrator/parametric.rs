//! Client side of the parametric-memory contract.
//!
//! A parametric endpoint is a model fine-tuned on exported rounds. It serves
//! `POST {endpoint}/generate` with body `{"prompt": ...}` and answers
//! `{"text": ..., "trained_round": n}`.

use std::sync::OnceLock;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ParametricError {
    #[error("parametric endpoint unavailable: {0}")]
    EndpointUnavailable(String),
    #[error("parametric endpoint returned a malformed reply: {0}")]
    BadReply(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerateRequest {
    pub prompt: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParametricReply {
    pub text: String,
    pub trained_round: u32,
}

pub trait ParametricMemory: Send + Sync {
    fn generate(&self, prompt: &str) -> Result<ParametricReply, ParametricError>;
}

pub struct HttpParametric {
    endpoint: String,
    timeout: Duration,
    http: OnceLock<reqwest::blocking::Client>,
}

impl HttpParametric {
    pub fn new(endpoint: impl Into<String>, timeout: Duration) -> Self {
        Self {
            endpoint: endpoint.into().trim_end_matches('/').to_string(),
            timeout,
            http: OnceLock::new(),
        }
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }
}

impl ParametricMemory for HttpParametric {
    fn generate(&self, prompt: &str) -> Result<ParametricReply, ParametricError> {
        let client = self.http.get_or_init(reqwest::blocking::Client::new);
        let resp = client
            .post(format!("{}/generate", self.endpoint))
            .timeout(self.timeout)
            .json(&GenerateRequest {
                prompt: prompt.to_string(),
            })
            .send()
            .map_err(|e| ParametricError::EndpointUnavailable(e.to_string()))?;
        let status = resp.status();
        if !status.is_success() {
            return Err(ParametricError::EndpointUnavailable(format!("status {status}")));
        }
        let body = resp
            .text()
            .map_err(|e| ParametricError::EndpointUnavailable(e.to_string()))?;
        serde_json::from_str(&body).map_err(|e| ParametricError::BadReply(e.to_string()))
    }
}

/// Returns the prompt verbatim; stands in for a trained model in tests and demos.
#[derive(Debug, Clone, Copy, Default)]
pub struct EchoParametric {
    pub trained_round: u32,
}

impl ParametricMemory for EchoParametric {
    fn generate(&self, prompt: &str) -> Result<ParametricReply, ParametricError> {
        Ok(ParametricReply {
            text: prompt.to_string(),
            trained_round: self.trained_round,
        })
    }
}
