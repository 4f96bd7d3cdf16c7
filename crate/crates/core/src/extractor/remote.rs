use std::sync::{Arc, OnceLock};
use std::time::Duration;

use parking_lot::{Condvar, Mutex};
use serde::{Deserialize, Serialize};

use crate::chunk_store::{Chunk, ChunkId};

use super::{validate_remote_output, ExtractError, ExtractionResult, ExtractorBackend, DEFAULT_COMPRESSION_BUDGET};

pub const DEFAULT_PROMPT_VERSION: &str = "extract-v1";

/// `{budget}` and `{chunks}` are substituted at call time.
pub const DEFAULT_PROMPT_TEMPLATE: &str = "\
You maintain an agent's long-term memory. Read the numbered text chunks below.
1. Write a `description` of at most {budget} characters that keeps only the essential facts.
2. List every entity (person, place, object, concept) and every typed relation between them.
Reply with a single JSON object and nothing else:
{\"description\": string,
 \"entities\": [{\"name\": string, \"etype\": string, \"kind\": \"core\"|\"episodic\"|\"semantic\", \"chunks\": [chunk numbers]}],
 \"relations\": [{\"src\": entity name, \"dst\": entity name, \"label\": string, \"kind\": \"core\"|\"episodic\"|\"semantic\", \"chunks\": [chunk numbers]}]}
Use kind=core for durable facts about the user, episodic for dated events, semantic for general knowledge.
Every relation endpoint must also appear in entities. Cite only the chunk numbers given.

Chunks:
{chunks}";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteExtractorConfig {
    pub endpoint: String,
    pub model: String,
    pub timeout_ms: u64,
    pub max_retries: u32,
    pub retry_backoff_ms: u64,
    pub max_in_flight: usize,
    pub prompt_version: String,
    pub prompt_template: String,
    pub compression_budget: usize,
}

impl RemoteExtractorConfig {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            model: model.into(),
            timeout_ms: 60_000,
            max_retries: 2,
            retry_backoff_ms: 500,
            max_in_flight: 4,
            prompt_version: DEFAULT_PROMPT_VERSION.into(),
            prompt_template: DEFAULT_PROMPT_TEMPLATE.into(),
            compression_budget: DEFAULT_COMPRESSION_BUDGET,
        }
    }
}

#[derive(Serialize)]
struct ExtractRequest<'a> {
    model: &'a str,
    prompt_version: &'a str,
    prompt: String,
}

#[derive(Deserialize)]
struct ExtractResponse {
    text: String,
}

/// Counting semaphore bounding concurrent requests.
struct InFlight {
    used: Mutex<usize>,
    freed: Condvar,
    limit: usize,
}

struct Permit<'a>(&'a InFlight);

impl InFlight {
    fn acquire(&self) -> Permit<'_> {
        let mut used = self.used.lock();
        while *used >= self.limit {
            self.freed.wait(&mut used);
        }
        *used += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.used.lock() -= 1;
        self.0.freed.notify_one();
    }
}

pub struct RemoteExtractor {
    config: RemoteExtractorConfig,
    in_flight: InFlight,
    http: OnceLock<reqwest::blocking::Client>,
}

impl RemoteExtractor {
    pub fn new(config: RemoteExtractorConfig) -> Self {
        let limit = config.max_in_flight.max(1);
        Self {
            config,
            in_flight: InFlight {
                used: Mutex::new(0),
                freed: Condvar::new(),
                limit,
            },
            http: OnceLock::new(),
        }
    }

    pub fn render_prompt(&self, chunks: &[Arc<Chunk>]) -> String {
        let body = chunks
            .iter()
            .map(|c| format!("[{}] {}", c.id.sequence, c.content))
            .collect::<Vec<_>>()
            .join("\n");
        self.config
            .prompt_template
            .replace("{budget}", &self.config.compression_budget.to_string())
            .replace("{chunks}", &body)
    }

    fn call(&self, prompt: String) -> Result<String, ExtractError> {
        let _permit = self.in_flight.acquire();
        let client = self.http.get_or_init(reqwest::blocking::Client::new);
        let req = ExtractRequest {
            model: &self.config.model,
            prompt_version: &self.config.prompt_version,
            prompt,
        };
        let mut last = String::new();
        for attempt in 0..=self.config.max_retries {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(self.config.retry_backoff_ms));
            }
            let sent = client
                .post(&self.config.endpoint)
                .timeout(Duration::from_millis(self.config.timeout_ms))
                .json(&req)
                .send()
                .and_then(|r| r.error_for_status());
            match sent {
                Ok(resp) => {
                    return resp
                        .json::<ExtractResponse>()
                        .map(|r| r.text)
                        .map_err(|e| ExtractError::SchemaViolation(format!("response envelope: {e}")))
                }
                Err(e) => last = e.to_string(),
            }
        }
        Err(ExtractError::BackendUnavailable(last))
    }
}

impl ExtractorBackend for RemoteExtractor {
    fn name(&self) -> &str {
        &self.config.model
    }

    fn extract(&self, chunks: &[Arc<Chunk>]) -> Result<ExtractionResult, ExtractError> {
        if chunks.is_empty() {
            return Err(ExtractError::EmptyInput);
        }
        let raw = self.call(self.render_prompt(chunks))?;
        let ids: Vec<ChunkId> = chunks.iter().map(|c| c.id.clone()).collect();
        let result = validate_remote_output(&raw, &ids)?;
        let len = result.description.chars().count();
        if len > self.config.compression_budget {
            return Err(ExtractError::SchemaViolation(format!(
                "description has {len} characters, budget is {}",
                self.config.compression_budget
            )));
        }
        Ok(result)
    }
}
