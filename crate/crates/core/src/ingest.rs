//! Turning media into text chunks.
//!
//! Each modality has one registered captioner. A captioner is either the
//! deterministic `mock` (a pure function of the media reference) or a remote
//! HTTP service that receives the media and returns a caption. The caption
//! becomes the content of a chunk that carries the media reference, so every
//! graph element derived from it can be traced back to the source media.

use std::collections::HashMap;
use std::path::Path;
use std::sync::{Arc, OnceLock};
use std::time::Duration;

use base64::Engine;
use parking_lot::RwLock;
use serde::{Deserialize, Serialize};

use crate::chunk_store::{ChunkError, ChunkId, ChunkStore, MediaRef, Modality, NewChunk};
use crate::clock::{Clock, Timestamp};

pub const CAPTIONER_KEY_ENV: &str = "MEMVERSE_CAPTIONER_KEY";
const FRAME_SEPARATOR: &str = " | ";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum CaptionerEndpoint {
    Mock,
    Http(String),
}

impl From<CaptionerEndpoint> for String {
    fn from(e: CaptionerEndpoint) -> String {
        match e {
            CaptionerEndpoint::Mock => "mock".into(),
            CaptionerEndpoint::Http(u) => u,
        }
    }
}

impl TryFrom<String> for CaptionerEndpoint {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        let s = s.trim();
        if s == "mock" {
            Ok(CaptionerEndpoint::Mock)
        } else if s.starts_with("http://") || s.starts_with("https://") {
            Ok(CaptionerEndpoint::Http(s.to_string()))
        } else {
            Err(format!(
                "captioner endpoint must be `mock` or an http(s) URL, got `{s}`"
            ))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionerConfig {
    pub modality: Modality,
    pub endpoint: CaptionerEndpoint,
    pub model_name: String,
    pub timeout_ms: u64,
    pub max_retries: u32,
    /// Frames captioned per video. Ignored for other modalities.
    pub frame_sample_count: u32,
    /// Fixed delay between attempts against a remote captioner.
    #[serde(default = "default_backoff_ms")]
    pub retry_backoff_ms: u64,
}

fn default_backoff_ms() -> u64 {
    200
}

impl CaptionerConfig {
    pub fn mock(modality: Modality) -> Self {
        Self {
            modality,
            endpoint: CaptionerEndpoint::Mock,
            model_name: "mock".into(),
            timeout_ms: 30_000,
            max_retries: 2,
            frame_sample_count: 1,
            retry_backoff_ms: default_backoff_ms(),
        }
    }

    pub fn validate(&self) -> Result<(), IngestError> {
        if self.timeout_ms == 0 {
            return Err(IngestError::ConfigInvalid("timeout_ms must be >= 1".into()));
        }
        if self.modality == Modality::Video && self.frame_sample_count == 0 {
            return Err(IngestError::ConfigInvalid(
                "frame_sample_count must be >= 1 for video".into(),
            ));
        }
        if self.model_name.trim().is_empty() {
            return Err(IngestError::ConfigInvalid("model_name is empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Description {
    pub text: String,
    pub source: MediaRef,
    pub captioner: String,
    pub produced_at: Timestamp,
}

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("captioner for {expected} cannot describe {found} media")]
    ModalityMismatch { expected: Modality, found: Modality },
    #[error("captioner unavailable: {0}")]
    CaptionerUnavailable(String),
    #[error("captioner returned an empty caption")]
    EmptyCaption,
    #[error("invalid captioner config: {0}")]
    ConfigInvalid(String),
    #[error("cannot read media {uri}: {reason}")]
    MediaUnreadable { uri: String, reason: String },
    #[error(transparent)]
    Store(#[from] ChunkError),
}

/// Last path segment of the uri with its extension removed.
pub fn uri_stem(uri: &str) -> &str {
    let path = uri.split(['?', '#']).next().unwrap_or(uri);
    let last = path.trim_end_matches('/').rsplit('/').next().unwrap_or(path);
    let stem = match last.rfind('.') {
        Some(0) | None => last,
        Some(i) => &last[..i],
    };
    if stem.is_empty() {
        uri
    } else {
        stem
    }
}

/// Deterministic caption used when the endpoint is `mock`.
pub fn mock_caption(media: &MediaRef, frame_sample_count: u32) -> String {
    let stem = uri_stem(&media.uri);
    match media.modality {
        Modality::Image => format!("image: {stem}"),
        Modality::Audio => format!("audio transcript: {stem}"),
        Modality::Video => format!("video: {stem} [frames={frame_sample_count}]"),
        Modality::Text => format!("document: {stem}"),
    }
}

fn instruction(modality: Modality) -> &'static str {
    match modality {
        Modality::Image => "Describe this image in factual sentences, naming people, objects and places.",
        Modality::Audio => "Transcribe this audio verbatim.",
        Modality::Video => "Describe this video frame in one factual sentence.",
        Modality::Text => "Summarize this document in factual sentences.",
    }
}

#[derive(Debug, Serialize)]
struct FrameSpec {
    index: u32,
    count: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    time_s: Option<f64>,
}

#[derive(Debug, Serialize)]
struct CaptionRequest<'a> {
    model: &'a str,
    instruction: &'a str,
    modality: Modality,
    #[serde(skip_serializing_if = "Option::is_none")]
    media_uri: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    media_b64: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    frame: Option<FrameSpec>,
}

#[derive(Debug, Deserialize)]
struct CaptionResponse {
    text: String,
}

/// Evenly spaced frame timestamps at the centre of each of `n` segments.
pub fn frame_times(duration_s: Option<f64>, n: u32) -> Vec<Option<f64>> {
    (0..n)
        .map(|i| duration_s.map(|d| d * (f64::from(i) + 0.5) / f64::from(n)))
        .collect()
}

pub struct Ingestor {
    registry: RwLock<HashMap<Modality, CaptionerConfig>>,
    clock: Arc<dyn Clock>,
    http: OnceLock<reqwest::blocking::Client>,
}

impl Ingestor {
    pub fn new(clock: Arc<dyn Clock>) -> Self {
        Self {
            registry: RwLock::new(HashMap::new()),
            clock,
            http: OnceLock::new(),
        }
    }

    /// Ingestor with the mock captioner registered for image, audio and video.
    pub fn with_mocks(clock: Arc<dyn Clock>) -> Self {
        let ing = Self::new(clock);
        for m in [Modality::Image, Modality::Audio, Modality::Video] {
            ing.register_captioner(CaptionerConfig::mock(m))
                .expect("mock config is valid");
        }
        ing
    }

    pub fn register_captioner(&self, config: CaptionerConfig) -> Result<(), IngestError> {
        config.validate()?;
        self.registry.write().insert(config.modality, config);
        Ok(())
    }

    pub fn captioner(&self, modality: Modality) -> Option<CaptionerConfig> {
        self.registry.read().get(&modality).cloned()
    }

    pub fn describe(&self, media: &MediaRef, config: &CaptionerConfig) -> Result<Description, IngestError> {
        if config.modality != media.modality {
            return Err(IngestError::ModalityMismatch {
                expected: config.modality,
                found: media.modality,
            });
        }
        let text = match &config.endpoint {
            CaptionerEndpoint::Mock => mock_caption(media, config.frame_sample_count),
            CaptionerEndpoint::Http(url) => self.describe_remote(url, media, config)?,
        };
        if text.trim().is_empty() {
            return Err(IngestError::EmptyCaption);
        }
        Ok(Description {
            text,
            source: media.clone(),
            captioner: config.model_name.clone(),
            produced_at: self.clock.now(),
        })
    }

    fn describe_remote(&self, url: &str, media: &MediaRef, config: &CaptionerConfig) -> Result<String, IngestError> {
        let payload = load_payload(media)?;
        let (media_uri, media_b64) = match &payload {
            Some(b64) => (None, Some(b64.clone())),
            None => (Some(media.uri.as_str()), None),
        };
        if media.modality != Modality::Video {
            let req = CaptionRequest {
                model: &config.model_name,
                instruction: instruction(media.modality),
                modality: media.modality,
                media_uri,
                media_b64,
                frame: None,
            };
            return self.call_with_retry(url, &req, config);
        }

        let duration = media.meta.get("duration_seconds").and_then(|d| d.parse::<f64>().ok());
        let n = config.frame_sample_count;
        let mut captions = Vec::with_capacity(n as usize);
        for (i, t) in frame_times(duration, n).into_iter().enumerate() {
            let req = CaptionRequest {
                model: &config.model_name,
                instruction: instruction(Modality::Video),
                modality: Modality::Video,
                media_uri,
                media_b64: media_b64.clone(),
                frame: Some(FrameSpec {
                    index: i as u32,
                    count: n,
                    time_s: t,
                }),
            };
            captions.push(self.call_with_retry(url, &req, config)?);
        }
        Ok(captions.join(FRAME_SEPARATOR))
    }

    fn call_with_retry(
        &self,
        url: &str,
        req: &CaptionRequest<'_>,
        config: &CaptionerConfig,
    ) -> Result<String, IngestError> {
        let client = self.http.get_or_init(reqwest::blocking::Client::new);
        let key = std::env::var(CAPTIONER_KEY_ENV).ok();
        let mut last_err = String::new();
        for attempt in 0..=config.max_retries {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(config.retry_backoff_ms));
            }
            let mut rb = client
                .post(url)
                .timeout(Duration::from_millis(config.timeout_ms))
                .json(req);
            if let Some(k) = &key {
                rb = rb.bearer_auth(k);
            }
            match rb.send().and_then(|r| r.error_for_status()) {
                Ok(resp) => match resp.json::<CaptionResponse>() {
                    Ok(body) if body.text.trim().is_empty() => return Err(IngestError::EmptyCaption),
                    Ok(body) => return Ok(body.text),
                    Err(e) => last_err = format!("malformed caption response: {e}"),
                },
                Err(e) => last_err = e.to_string(),
            }
            tracing::warn!(url, attempt, error = %last_err, "captioner call failed");
        }
        Err(IngestError::CaptionerUnavailable(format!(
            "{url} failed after {} attempts: {last_err}",
            config.max_retries + 1
        )))
    }

    /// Captions `media` with its registered captioner and stores the caption as a chunk.
    pub fn ingest_media(
        &self,
        store: &ChunkStore,
        media: MediaRef,
        session_id: &str,
        turn_index: u64,
    ) -> Result<ChunkId, IngestError> {
        let desc = self.describe_registered(&media)?;
        let id = store.put_chunk(NewChunk {
            content: desc.text,
            session_id: session_id.to_string(),
            turn_index,
            media: vec![media],
            kind_hint: None,
        })?;
        Ok(id)
    }

    pub fn describe_registered(&self, media: &MediaRef) -> Result<Description, IngestError> {
        let config = self.captioner(media.modality).ok_or_else(|| {
            IngestError::CaptionerUnavailable(format!("no captioner registered for {}", media.modality))
        })?;
        self.describe(media, &config)
    }
}

/// Local files are shipped inline; anything else is passed by uri.
fn load_payload(media: &MediaRef) -> Result<Option<String>, IngestError> {
    let Some(path) = media.uri.strip_prefix("file://") else {
        return Ok(None);
    };
    let bytes = std::fs::read(Path::new(path)).map_err(|e| IngestError::MediaUnreadable {
        uri: media.uri.clone(),
        reason: e.to_string(),
    })?;
    Ok(Some(base64::engine::general_purpose::STANDARD.encode(bytes)))
}
