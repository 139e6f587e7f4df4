//! Uniform client layer for chat and embedding endpoints.
//!
//! Every endpoint speaks the OpenAI-compatible wire format, so local
//! servers, hosted APIs and the in-crate mock are interchangeable. The HTTP
//! client adds deterministic settings (temperature 0), bounded in-flight
//! concurrency, retry with exponential backoff, and a content-addressed
//! on-disk response cache keyed by the full logical request.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use base64::Engine;
use futures::stream::StreamExt;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tokio::sync::Semaphore;

use crate::condition::RenderedTrial;

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("endpoint error{}: {message}", status.map(|s| format!(" (status {s})")).unwrap_or_default())]
    Endpoint { status: Option<u16>, message: String },
    #[error("request timed out after {0:?}")]
    Timeout(Duration),
    #[error("auth error: {0}")]
    Auth(String),
    #[error("embedding batch mixes dimensions: {first} and {other}")]
    DimensionMismatch { first: usize, other: usize },
    #[error("unusable response payload: {0}")]
    BadResponse(String),
    #[error("cache i/o: {0}")]
    Cache(#[from] std::io::Error),
    #[error("{0}")]
    Image(String),
}

impl GatewayError {
    fn is_transient(&self) -> bool {
        match self {
            GatewayError::Timeout(_) => true,
            GatewayError::Endpoint { status, .. } => {
                matches!(status, None | Some(429) | Some(500..=599))
            }
            _ => false,
        }
    }
}

/// Whether an endpoint serves chat completions or embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EndpointKind {
    Chat,
    Embedding,
}

/// Connection settings for one endpoint. API keys are read from the
/// environment variable named by `api_key_env`, never from the config
/// itself; an empty name means the endpoint is unauthenticated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointConfig {
    pub name: String,
    pub base_url: String,
    #[serde(default)]
    pub api_key_env: String,
    pub kind: EndpointKind,
    /// Model identifier sent in request bodies when the caller does not
    /// supply one (embedding requests, judge/converter endpoints).
    #[serde(default)]
    pub model: Option<String>,
    #[serde(default = "default_concurrency")]
    pub max_concurrency: usize,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: f64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
}

fn default_concurrency() -> usize {
    4
}
fn default_timeout_secs() -> f64 {
    120.0
}
fn default_retries() -> u32 {
    2
}

impl EndpointConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.name.is_empty() {
            return Err("endpoint name must be non-empty".into());
        }
        if self.max_concurrency < 1 {
            return Err(format!("endpoint {}: max_concurrency must be >= 1", self.name));
        }
        if self.timeout_secs <= 0.0 {
            return Err(format!("endpoint {}: timeout must be positive", self.name));
        }
        Ok(())
    }
}

/// Inline image payload: a data URI (or pass-through URL) plus a digest of
/// the underlying bytes for cache keying.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImagePayload {
    pub data_uri: String,
    pub digest: String,
}

/// Loads an image reference into a payload. File paths are inlined as
/// base64 data URIs; http(s) URLs pass through unchanged and are keyed by
/// the URL string.
pub fn load_image(reference: &str) -> Result<ImagePayload, GatewayError> {
    if reference.starts_with("http://") || reference.starts_with("https://") {
        return Ok(ImagePayload {
            data_uri: reference.to_string(),
            digest: hex::encode(Sha256::digest(reference.as_bytes())),
        });
    }
    let bytes = std::fs::read(reference)
        .map_err(|e| GatewayError::Image(format!("cannot read image {reference}: {e}")))?;
    let mime = match Path::new(reference)
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .as_deref()
    {
        Some("jpg") | Some("jpeg") => "image/jpeg",
        Some("gif") => "image/gif",
        Some("webp") => "image/webp",
        Some("bmp") => "image/bmp",
        _ => "image/png",
    };
    let encoded = base64::engine::general_purpose::STANDARD.encode(&bytes);
    Ok(ImagePayload {
        data_uri: format!("data:{mime};base64,{encoded}"),
        digest: hex::encode(Sha256::digest(&bytes)),
    })
}

/// One chat completion request. Temperature defaults to 0 so repeated runs
/// are as deterministic as the serving stack allows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub prompt_text: String,
    #[serde(default)]
    pub image: Option<ImagePayload>,
    pub temperature: f64,
}

impl ChatRequest {
    pub fn new(model: impl Into<String>, prompt_text: impl Into<String>) -> Self {
        Self {
            model: model.into(),
            prompt_text: prompt_text.into(),
            image: None,
            temperature: 0.0,
        }
    }

    pub fn with_image(mut self, image: ImagePayload) -> Self {
        self.image = Some(image);
        self
    }
}

/// Content-addressed key for a logical request: any change to endpoint
/// name, model, prompt, image bytes or temperature changes the key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CacheKey(String);

impl CacheKey {
    pub fn for_chat(endpoint_name: &str, req: &ChatRequest) -> Self {
        let mut hasher = Sha256::new();
        for part in [
            endpoint_name,
            "\x1f",
            &req.model,
            "\x1f",
            &req.prompt_text,
            "\x1f",
            req.image.as_ref().map(|i| i.digest.as_str()).unwrap_or("<none>"),
            "\x1f",
        ] {
            hasher.update(part.as_bytes());
        }
        hasher.update(req.temperature.to_bits().to_le_bytes());
        CacheKey(hex::encode(hasher.finalize()))
    }

    pub fn as_hex(&self) -> &str {
        &self.0
    }
}

/// One response file per key, written atomically (temp file + rename) so
/// concurrent readers never observe a torn write.
#[derive(Debug, Clone)]
pub struct DiskCache {
    dir: PathBuf,
    counter: Arc<AtomicU64>,
}

impl DiskCache {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self, std::io::Error> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        Ok(Self {
            dir,
            counter: Arc::new(AtomicU64::new(0)),
        })
    }

    fn path_for(&self, key: &CacheKey) -> PathBuf {
        self.dir.join(format!("{}.txt", key.as_hex()))
    }

    pub fn get(&self, key: &CacheKey) -> Option<String> {
        std::fs::read_to_string(self.path_for(key)).ok()
    }

    pub fn put(&self, key: &CacheKey, value: &str) -> Result<(), std::io::Error> {
        let tmp = self.dir.join(format!(
            ".{}.{}.{}.tmp",
            key.as_hex(),
            std::process::id(),
            self.counter.fetch_add(1, Ordering::Relaxed)
        ));
        std::fs::write(&tmp, value)?;
        std::fs::rename(&tmp, self.path_for(key))
    }
}

/// Anything that can answer a chat completion request.
#[async_trait]
pub trait ChatEndpoint: Send + Sync {
    async fn chat(&self, req: &ChatRequest) -> Result<String, GatewayError>;
    fn name(&self) -> &str;
}

/// Anything that can embed a batch of texts into unit-norm vectors.
#[async_trait]
pub trait EmbeddingEndpoint: Send + Sync {
    async fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, GatewayError>;
    /// Stable identity used to decide whether a persisted index can be
    /// reused (endpoint name plus model).
    fn identity(&self) -> String;
}

/// Scales a vector to unit L2 norm in place. All-zero vectors are left
/// untouched rather than turned into NaNs.
pub fn l2_normalize(v: &mut [f32]) {
    let norm = v.iter().map(|x| (*x as f64) * (*x as f64)).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x = (*x as f64 / norm) as f32;
        }
    }
}

/// Checks a returned batch for ragged dimensions.
pub fn check_uniform_dims(vectors: &[Vec<f32>]) -> Result<(), GatewayError> {
    if let Some(first) = vectors.first() {
        for v in vectors {
            if v.len() != first.len() {
                return Err(GatewayError::DimensionMismatch {
                    first: first.len(),
                    other: v.len(),
                });
            }
        }
    }
    Ok(())
}

fn resolve_api_key(cfg: &EndpointConfig) -> Result<Option<String>, GatewayError> {
    if cfg.api_key_env.is_empty() {
        return Ok(None);
    }
    match std::env::var(&cfg.api_key_env) {
        Ok(key) if !key.is_empty() => Ok(Some(key)),
        _ => Err(GatewayError::Auth(format!(
            "environment variable {} is not set",
            cfg.api_key_env
        ))),
    }
}

fn backoff_delay(base: Duration, attempt: u32) -> Duration {
    // base 1s, factor 2, jitter +-20%
    let exp = base.as_secs_f64() * 2f64.powi(attempt as i32);
    let jitter = 0.8 + 0.4 * rand::random::<f64>();
    Duration::from_secs_f64(exp * jitter)
}

/// OpenAI-compatible chat client with retry, concurrency limit and cache.
pub struct HttpChat {
    cfg: EndpointConfig,
    api_key: Option<String>,
    client: reqwest::Client,
    limiter: Arc<Semaphore>,
    cache: Option<DiskCache>,
    backoff_base: Duration,
    network_calls: AtomicU64,
}

impl HttpChat {
    pub fn new(cfg: EndpointConfig) -> Result<Self, GatewayError> {
        assert!(cfg.kind == EndpointKind::Chat, "HttpChat needs a chat endpoint");
        let api_key = resolve_api_key(&cfg)?;
        let client = reqwest::Client::builder()
            .timeout(Duration::from_secs_f64(cfg.timeout_secs))
            .build()
            .map_err(|e| GatewayError::Endpoint {
                status: None,
                message: format!("cannot build http client: {e}"),
            })?;
        Ok(Self {
            limiter: Arc::new(Semaphore::new(cfg.max_concurrency)),
            api_key,
            client,
            cache: None,
            backoff_base: Duration::from_secs(1),
            network_calls: AtomicU64::new(0),
            cfg,
        })
    }

    pub fn with_cache(mut self, cache: DiskCache) -> Self {
        self.cache = Some(cache);
        self
    }

    /// Shrinks the retry backoff; used by tests that exercise the retry path.
    pub fn with_backoff_base(mut self, base: Duration) -> Self {
        self.backoff_base = base;
        self
    }

    pub fn network_calls(&self) -> u64 {
        self.network_calls.load(Ordering::Relaxed)
    }

    fn chat_body(&self, req: &ChatRequest) -> serde_json::Value {
        let mut content = vec![serde_json::json!({"type": "text", "text": req.prompt_text})];
        if let Some(image) = &req.image {
            content.push(serde_json::json!({
                "type": "image_url",
                "image_url": {"url": image.data_uri}
            }));
        }
        serde_json::json!({
            "model": req.model,
            "temperature": req.temperature,
            "messages": [{"role": "user", "content": content}],
        })
    }

    async fn send_once(&self, req: &ChatRequest) -> Result<String, GatewayError> {
        self.network_calls.fetch_add(1, Ordering::Relaxed);
        let url = format!("{}/chat/completions", self.cfg.base_url.trim_end_matches('/'));
        let mut builder = self.client.post(&url).json(&self.chat_body(req));
        if let Some(key) = &self.api_key {
            builder = builder.header("authorization", format!("Bearer {key}"));
        }
        let response = builder.send().await.map_err(classify_reqwest(&self.cfg))?;
        let status = response.status();
        let body = response.text().await.unwrap_or_default();
        if status == reqwest::StatusCode::UNAUTHORIZED || status == reqwest::StatusCode::FORBIDDEN {
            return Err(GatewayError::Auth(format!(
                "endpoint {} rejected the API key (status {status})",
                self.cfg.name
            )));
        }
        if !status.is_success() {
            return Err(GatewayError::Endpoint {
                status: Some(status.as_u16()),
                message: excerpt(&body),
            });
        }
        let parsed: serde_json::Value = serde_json::from_str(&body)
            .map_err(|e| GatewayError::BadResponse(format!("invalid JSON: {e}")))?;
        parsed["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| {
                GatewayError::BadResponse("missing choices[0].message.content".into())
            })
    }

    async fn send_with_retries(&self, req: &ChatRequest) -> Result<String, GatewayError> {
        let mut attempt = 0u32;
        loop {
            match self.send_once(req).await {
                Ok(text) => return Ok(text),
                Err(err) if err.is_transient() && attempt < self.cfg.max_retries => {
                    tokio::time::sleep(backoff_delay(self.backoff_base, attempt)).await;
                    attempt += 1;
                }
                Err(err) => return Err(err),
            }
        }
    }
}

#[async_trait]
impl ChatEndpoint for HttpChat {
    async fn chat(&self, req: &ChatRequest) -> Result<String, GatewayError> {
        let key = CacheKey::for_chat(&self.cfg.name, req);
        if let Some(cache) = &self.cache {
            if let Some(hit) = cache.get(&key) {
                return Ok(hit);
            }
        }
        let _permit = self.limiter.acquire().await.expect("limiter not closed");
        // Re-check after acquiring: another task may have filled the key.
        if let Some(cache) = &self.cache {
            if let Some(hit) = cache.get(&key) {
                return Ok(hit);
            }
        }
        let text = self.send_with_retries(req).await?;
        if let Some(cache) = &self.cache {
            cache.put(&key, &text)?;
        }
        Ok(text)
    }

    fn name(&self) -> &str {
        &self.cfg.name
    }
}

/// OpenAI-compatible embeddings client. Vectors are L2-normalized on the
/// way out regardless of what the upstream returns.
pub struct HttpEmbedding {
    cfg: EndpointConfig,
    api_key: Option<String>,
    client: reqwest::Client,
    limiter: Arc<Semaphore>,
    backoff_base: Duration,
}

impl HttpEmbedding {
    pub fn new(cfg: EndpointConfig) -> Result<Self, GatewayError> {
        assert!(
            cfg.kind == EndpointKind::Embedding,
            "HttpEmbedding needs an embedding endpoint"
        );
        let api_key = resolve_api_key(&cfg)?;
        let client = reqwest::Client::builder()
            .timeout(Duration::from_secs_f64(cfg.timeout_secs))
            .build()
            .map_err(|e| GatewayError::Endpoint {
                status: None,
                message: format!("cannot build http client: {e}"),
            })?;
        Ok(Self {
            limiter: Arc::new(Semaphore::new(cfg.max_concurrency)),
            api_key,
            client,
            backoff_base: Duration::from_secs(1),
            cfg,
        })
    }

    pub fn with_backoff_base(mut self, base: Duration) -> Self {
        self.backoff_base = base;
        self
    }

    async fn send_once(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, GatewayError> {
        let url = format!("{}/embeddings", self.cfg.base_url.trim_end_matches('/'));
        let body = serde_json::json!({
            "model": self.cfg.model.as_deref().unwrap_or("default"),
            "input": texts,
        });
        let mut builder = self.client.post(&url).json(&body);
        if let Some(key) = &self.api_key {
            builder = builder.header("authorization", format!("Bearer {key}"));
        }
        let response = builder.send().await.map_err(classify_reqwest(&self.cfg))?;
        let status = response.status();
        let body = response.text().await.unwrap_or_default();
        if !status.is_success() {
            return Err(GatewayError::Endpoint {
                status: Some(status.as_u16()),
                message: excerpt(&body),
            });
        }
        #[derive(Deserialize)]
        struct Row {
            #[serde(default)]
            index: Option<usize>,
            embedding: Vec<f32>,
        }
        #[derive(Deserialize)]
        struct Payload {
            data: Vec<Row>,
        }
        let payload: Payload = serde_json::from_str(&body)
            .map_err(|e| GatewayError::BadResponse(format!("invalid embeddings JSON: {e}")))?;
        if payload.data.len() != texts.len() {
            return Err(GatewayError::BadResponse(format!(
                "asked for {} embeddings, got {}",
                texts.len(),
                payload.data.len()
            )));
        }
        let mut rows: Vec<Row> = payload.data;
        rows.sort_by_key(|r| r.index.unwrap_or(0));
        Ok(rows.into_iter().map(|r| r.embedding).collect())
    }
}

#[async_trait]
impl EmbeddingEndpoint for HttpEmbedding {
    async fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, GatewayError> {
        assert!(!texts.is_empty(), "embed requires a non-empty batch");
        let _permit = self.limiter.acquire().await.expect("limiter not closed");
        let mut attempt = 0u32;
        let mut vectors = loop {
            match self.send_once(texts).await {
                Ok(v) => break v,
                Err(err) if err.is_transient() && attempt < self.cfg.max_retries => {
                    tokio::time::sleep(backoff_delay(self.backoff_base, attempt)).await;
                    attempt += 1;
                }
                Err(err) => return Err(err),
            }
        };
        check_uniform_dims(&vectors)?;
        for v in &mut vectors {
            l2_normalize(v);
        }
        Ok(vectors)
    }

    fn identity(&self) -> String {
        format!(
            "{}:{}",
            self.cfg.name,
            self.cfg.model.as_deref().unwrap_or("default")
        )
    }
}

fn classify_reqwest(cfg: &EndpointConfig) -> impl Fn(reqwest::Error) -> GatewayError + '_ {
    move |e: reqwest::Error| {
        if e.is_timeout() {
            GatewayError::Timeout(Duration::from_secs_f64(cfg.timeout_secs))
        } else {
            GatewayError::Endpoint {
                status: None,
                message: format!("transport error: {e}"),
            }
        }
    }
}

fn excerpt(body: &str) -> String {
    const LIMIT: usize = 200;
    if body.len() <= LIMIT {
        body.to_string()
    } else {
        let mut end = LIMIT;
        while !body.is_char_boundary(end) {
            end -= 1;
        }
        format!("{}...", &body[..end])
    }
}

/// One completed (or failed) trial dispatch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub model: String,
    pub trial: RenderedTrial,
    pub prompt_digest: String,
    #[serde(default)]
    pub response_text: Option<String>,
    #[serde(default)]
    pub error: Option<String>,
    pub started_at_ms: u64,
    pub finished_at_ms: u64,
}

impl RunRecord {
    pub fn sample_id(&self) -> &str {
        &self.trial.sample_id
    }

    pub fn condition_key(&self) -> String {
        self.trial.condition.key()
    }

    pub fn succeeded(&self) -> bool {
        self.error.is_none()
    }
}

fn now_ms() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

pub fn prompt_digest(prompt_text: &str) -> String {
    hex::encode(Sha256::digest(prompt_text.as_bytes()))
}

/// Builds the chat request for a trial, loading and inlining the image when
/// the trial calls for one.
pub fn chat_request_for(trial: &RenderedTrial, model: &str) -> Result<ChatRequest, GatewayError> {
    let mut req = ChatRequest::new(model, trial.prompt_text.clone());
    if trial.image_attached {
        let reference = trial.image_ref.as_deref().ok_or_else(|| {
            GatewayError::Image(format!(
                "trial {} expects an image but the sample carries none",
                trial.sample_id
            ))
        })?;
        req = req.with_image(load_image(reference)?);
    }
    Ok(req)
}

/// Dispatches a batch of trials against one endpoint.
///
/// At most `max_concurrency` requests are in flight at once; the output is
/// order-aligned with the input regardless of completion order, and a
/// failing trial produces a record carrying the error rather than aborting
/// the batch.
pub async fn run_batch(
    trials: &[RenderedTrial],
    model: &str,
    endpoint: &dyn ChatEndpoint,
    max_concurrency: usize,
    run_id: &str,
) -> Vec<RunRecord> {
    assert!(max_concurrency >= 1, "max_concurrency must be >= 1");
    futures::stream::iter(trials.iter())
        .map(|trial| async move {
            let started_at_ms = now_ms();
            let outcome = match chat_request_for(trial, model) {
                Ok(req) => endpoint.chat(&req).await,
                Err(e) => Err(e),
            };
            let (response_text, error) = match outcome {
                Ok(text) => (Some(text), None),
                Err(e) => (None, Some(e.to_string())),
            };
            RunRecord {
                run_id: run_id.to_string(),
                model: model.to_string(),
                prompt_digest: prompt_digest(&trial.prompt_text),
                trial: trial.clone(),
                response_text,
                error,
                started_at_ms,
                finished_at_ms: now_ms(),
            }
        })
        .buffered(max_concurrency)
        .collect()
        .await
}

#[cfg(test)]
mod tests {
    use super::*;

    fn request() -> ChatRequest {
        ChatRequest::new("m1", "What is 2+2?")
    }

    #[test]
    fn cache_key_changes_with_every_field() {
        let base = CacheKey::for_chat("ep", &request());
        assert_eq!(base, CacheKey::for_chat("ep", &request()));

        assert_ne!(base, CacheKey::for_chat("other", &request()));

        let mut req = request();
        req.model = "m2".into();
        assert_ne!(base, CacheKey::for_chat("ep", &req));

        let mut req = request();
        req.prompt_text.push('!');
        assert_ne!(base, CacheKey::for_chat("ep", &req));

        let mut req = request();
        req.temperature = 0.5;
        assert_ne!(base, CacheKey::for_chat("ep", &req));

        let req = request().with_image(ImagePayload {
            data_uri: "data:image/png;base64,AAAA".into(),
            digest: "abc".into(),
        });
        assert_ne!(base, CacheKey::for_chat("ep", &req));
    }

    #[test]
    fn disk_cache_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let cache = DiskCache::new(dir.path().join("cache")).unwrap();
        let key = CacheKey::for_chat("ep", &request());
        assert_eq!(cache.get(&key), None);
        cache.put(&key, "four").unwrap();
        assert_eq!(cache.get(&key).as_deref(), Some("four"));
    }

    #[test]
    fn normalize_produces_unit_vectors_and_keeps_zeros() {
        let mut v = vec![3.0f32, 4.0];
        l2_normalize(&mut v);
        let norm: f32 = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);

        let mut z = vec![0.0f32, 0.0];
        l2_normalize(&mut z);
        assert_eq!(z, vec![0.0, 0.0]);
    }

    #[test]
    fn ragged_batch_is_a_dimension_mismatch() {
        let err = check_uniform_dims(&[vec![1.0, 2.0, 3.0], vec![1.0, 2.0, 3.0, 4.0]]).unwrap_err();
        assert!(matches!(
            err,
            GatewayError::DimensionMismatch { first: 3, other: 4 }
        ));
    }

    #[test]
    fn transient_classification() {
        assert!(GatewayError::Timeout(Duration::from_secs(1)).is_transient());
        assert!(GatewayError::Endpoint { status: Some(500), message: String::new() }.is_transient());
        assert!(GatewayError::Endpoint { status: Some(429), message: String::new() }.is_transient());
        assert!(!GatewayError::Endpoint { status: Some(400), message: String::new() }.is_transient());
        assert!(!GatewayError::Auth("nope".into()).is_transient());
    }

    #[test]
    fn excerpt_truncates_on_char_boundary() {
        let long = "é".repeat(300);
        let cut = excerpt(&long);
        assert!(cut.len() <= 203);
        assert!(cut.ends_with("..."));
    }
}
