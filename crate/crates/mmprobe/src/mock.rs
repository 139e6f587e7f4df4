//! Deterministic fake chat and embedding endpoints.
//!
//! The same scripted behaviors are reachable in-process (fast unit tests)
//! and over the real OpenAI-compatible wire format via [`MockServer`]
//! (integration tests of the HTTP path), so serialization is exercised
//! exactly once.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use axum::extract::State;
use axum::http::StatusCode;
use axum::routing::post;
use axum::{Json, Router};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use sha2::{Digest, Sha256};

use crate::gateway::{
    check_uniform_dims, l2_normalize, ChatEndpoint, ChatRequest, EmbeddingEndpoint, GatewayError,
    ImagePayload,
};

/// Fixed reply emitted whenever a scripted behavior decides to answer
/// incorrectly. Chosen so it never collides with test gold aliases.
pub const WRONG_ANSWER: &str = "unanswerable";

/// What the scripted endpoint does with each request.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Behavior {
    /// Reply with the prompt itself.
    Echo,
    /// Reply with the gold text iff an image is attached, else wrong.
    GoldIfImage,
    /// Always reply with the gold text.
    GoldAlways,
    /// Reply with the gold text iff it already appears in the prompt;
    /// models a system whose answer depends entirely on retrieved context.
    GoldIfContextContainsGold,
    /// Always reply with the fixed wrong string.
    AlwaysWrong,
    /// Act as a grading judge: "Yes" iff the prediction contains either
    /// part of the two-part answer, else "No".
    JudgeExactMatch,
}

/// A scripted behavior plus its gold lookup and injected failures.
///
/// `gold_lookup` maps a marker string to the gold text for the sample it
/// belongs to; the endpoint resolves a request by finding the entry whose
/// marker occurs in the prompt (longest marker wins). Register the question
/// text and, if knowledge-query trials run, the knowledge question too.
#[derive(Debug, Clone, Default)]
pub struct Script {
    pub behavior: Option<Behavior>,
    pub gold_lookup: BTreeMap<String, String>,
    /// Request ordinal (0-based, in arrival order) to HTTP status to fail with.
    pub failure_plan: BTreeMap<usize, u16>,
}

impl Script {
    pub fn new(behavior: Behavior) -> Self {
        Self {
            behavior: Some(behavior),
            gold_lookup: BTreeMap::new(),
            failure_plan: BTreeMap::new(),
        }
    }

    pub fn with_gold(mut self, marker: impl Into<String>, gold: impl Into<String>) -> Self {
        self.gold_lookup.insert(marker.into(), gold.into());
        self
    }

    pub fn with_failure(mut self, ordinal: usize, status: u16) -> Self {
        self.failure_plan.insert(ordinal, status);
        self
    }

    fn behavior(&self) -> Behavior {
        self.behavior.expect("script must set a behavior")
    }

    pub fn validate(&self) -> Result<(), String> {
        let behavior = self.behavior.ok_or("script must set a behavior")?;
        let needs_gold = matches!(
            behavior,
            Behavior::GoldIfImage | Behavior::GoldAlways | Behavior::GoldIfContextContainsGold
        );
        if needs_gold && self.gold_lookup.is_empty() {
            return Err(format!("behavior {behavior:?} requires a gold_lookup"));
        }
        Ok(())
    }

    fn gold_for(&self, prompt: &str) -> Result<&str, GatewayError> {
        // Longest marker first so "question 12" is not shadowed by "question 1".
        let mut entries: Vec<(&String, &String)> = self.gold_lookup.iter().collect();
        entries.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then_with(|| a.0.cmp(b.0)));
        entries
            .into_iter()
            .find(|(marker, _)| prompt.contains(marker.as_str()))
            .map(|(_, gold)| gold.as_str())
            .ok_or_else(|| GatewayError::Endpoint {
                status: None,
                message: "mock: no gold_lookup marker matches the prompt".into(),
            })
    }
}

/// Evaluates one request against a script. `ordinal` is the 0-based arrival
/// index, consulted for injected failures.
pub fn respond(req: &ChatRequest, script: &Script, ordinal: usize) -> Result<String, GatewayError> {
    if let Some(&status) = script.failure_plan.get(&ordinal) {
        return Err(GatewayError::Endpoint {
            status: Some(status),
            message: format!("mock: injected failure for request {ordinal}"),
        });
    }
    match script.behavior() {
        Behavior::Echo => Ok(req.prompt_text.clone()),
        Behavior::GoldIfImage => {
            let gold = script.gold_for(&req.prompt_text)?;
            Ok(if req.image.is_some() {
                gold.to_string()
            } else {
                WRONG_ANSWER.to_string()
            })
        }
        Behavior::GoldAlways => Ok(script.gold_for(&req.prompt_text)?.to_string()),
        Behavior::GoldIfContextContainsGold => {
            let gold = script.gold_for(&req.prompt_text)?;
            Ok(if req.prompt_text.contains(gold) {
                gold.to_string()
            } else {
                WRONG_ANSWER.to_string()
            })
        }
        Behavior::AlwaysWrong => Ok(WRONG_ANSWER.to_string()),
        Behavior::JudgeExactMatch => Ok(judge_exact_match(&req.prompt_text)),
    }
}

/// Parses the grading prompt's Prediction/Answer slots and string-matches:
/// "Yes" iff the prediction contains the answer's letter part `({L})` or
/// its body part.
fn judge_exact_match(prompt: &str) -> String {
    let slot = |prefix: &str, terminator: &str| -> Option<&str> {
        let start = prompt.find(prefix)? + prefix.len();
        let rest = &prompt[start..];
        let end = rest.find(terminator)?;
        Some(rest[..end].trim())
    };
    let (Some(prediction), Some(answer)) = (
        slot("Prediction:\n", "\nAnswer:"),
        slot("Answer:\n", "\nOnly output"),
    ) else {
        return "No".to_string();
    };

    let matched = if answer.len() > 4 && answer.starts_with('(') && answer.as_bytes()[2] == b')' {
        let letter_part = &answer[..3];
        let body = &answer[4..];
        prediction.contains(letter_part) || prediction.contains(body)
    } else {
        prediction.contains(answer)
    };
    if matched { "Yes".to_string() } else { "No".to_string() }
}

/// In-process scripted chat endpoint, instrumented with request counters
/// and an in-flight high-water mark for concurrency tests.
pub struct MockChat {
    script: Script,
    name: String,
    latency: Option<Duration>,
    ordinal: AtomicUsize,
    in_flight: AtomicUsize,
    peak_in_flight: AtomicUsize,
}

impl MockChat {
    pub fn new(script: Script) -> Self {
        script.validate().expect("valid script");
        Self {
            script,
            name: "mock-chat".into(),
            latency: None,
            ordinal: AtomicUsize::new(0),
            in_flight: AtomicUsize::new(0),
            peak_in_flight: AtomicUsize::new(0),
        }
    }

    /// Adds a fixed artificial delay per request so concurrent dispatches
    /// actually overlap.
    pub fn with_latency(mut self, latency: Duration) -> Self {
        self.latency = Some(latency);
        self
    }

    pub fn calls(&self) -> usize {
        self.ordinal.load(Ordering::SeqCst)
    }

    pub fn peak_in_flight(&self) -> usize {
        self.peak_in_flight.load(Ordering::SeqCst)
    }
}

#[async_trait]
impl ChatEndpoint for MockChat {
    async fn chat(&self, req: &ChatRequest) -> Result<String, GatewayError> {
        let ordinal = self.ordinal.fetch_add(1, Ordering::SeqCst);
        let current = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak_in_flight.fetch_max(current, Ordering::SeqCst);
        if let Some(latency) = self.latency {
            tokio::time::sleep(latency).await;
        }
        let result = respond(req, &self.script, ordinal);
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
        result
    }

    fn name(&self) -> &str {
        &self.name
    }
}

/// Deterministic unit vector derived from a text's hash. Identical texts
/// always embed identically, which is what self-similarity retrieval tests
/// rely on.
pub fn embed_text(text: &str, dim: usize) -> Vec<f32> {
    let digest = Sha256::digest(text.as_bytes());
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    let mut rng = ChaCha8Rng::from_seed(seed);
    let mut v: Vec<f32> = (0..dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    l2_normalize(&mut v);
    v
}

/// Scripted embedding endpoint: hash-derived vectors by default, with
/// planted per-text vectors for tests that need controlled rankings.
pub struct MockEmbedder {
    dim: usize,
    planted: BTreeMap<String, Vec<f32>>,
    calls: AtomicUsize,
}

impl MockEmbedder {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            planted: BTreeMap::new(),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn with_planted(mut self, text: impl Into<String>, vector: Vec<f32>) -> Self {
        self.planted.insert(text.into(), vector);
        self
    }

    /// Number of embed batches served.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    fn embed_sync(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, GatewayError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let mut out = Vec::with_capacity(texts.len());
        for text in texts {
            let mut v = match self.planted.get(text) {
                Some(planted) => planted.clone(),
                None => embed_text(text, self.dim),
            };
            l2_normalize(&mut v);
            out.push(v);
        }
        check_uniform_dims(&out)?;
        Ok(out)
    }
}

#[async_trait]
impl EmbeddingEndpoint for MockEmbedder {
    async fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, GatewayError> {
        self.embed_sync(texts)
    }

    fn identity(&self) -> String {
        format!("mock-embedder:dim{}", self.dim)
    }
}

// --- HTTP front end -------------------------------------------------------

struct ServerState {
    chat: MockChat,
    embedder: MockEmbedder,
    chat_requests: AtomicUsize,
}

/// The scripted endpoints behind a real HTTP listener speaking the
/// OpenAI-compatible wire format.
pub struct MockServer {
    pub addr: SocketAddr,
    state: Arc<ServerState>,
    handle: tokio::task::JoinHandle<()>,
}

impl MockServer {
    /// Binds to an ephemeral local port and serves `/chat/completions` and
    /// `/embeddings`.
    pub async fn spawn(script: Script, embed_dim: usize) -> MockServer {
        Self::spawn_with(MockChat::new(script), MockEmbedder::new(embed_dim)).await
    }

    pub async fn spawn_with(chat: MockChat, embedder: MockEmbedder) -> MockServer {
        let state = Arc::new(ServerState {
            chat,
            embedder,
            chat_requests: AtomicUsize::new(0),
        });
        let app = Router::new()
            .route("/chat/completions", post(handle_chat))
            .route("/embeddings", post(handle_embeddings))
            .with_state(Arc::clone(&state));
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0")
            .await
            .expect("bind mock server");
        let addr = listener.local_addr().expect("local addr");
        let handle = tokio::spawn(async move {
            let _ = axum::serve(listener, app).await;
        });
        MockServer { addr, state, handle }
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Chat requests that reached the wire (cache hits never do).
    pub fn chat_requests(&self) -> usize {
        self.state.chat_requests.load(Ordering::SeqCst)
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        self.handle.abort();
    }
}

#[derive(Deserialize)]
struct WireChatRequest {
    #[serde(default)]
    model: String,
    #[serde(default)]
    temperature: f64,
    messages: Vec<WireMessage>,
}

#[derive(Deserialize)]
struct WireMessage {
    #[serde(default)]
    content: serde_json::Value,
}

fn parse_wire_request(body: &WireChatRequest) -> ChatRequest {
    let mut prompt = String::new();
    let mut image: Option<ImagePayload> = None;
    for message in &body.messages {
        match &message.content {
            serde_json::Value::String(text) => prompt.push_str(text),
            serde_json::Value::Array(parts) => {
                for part in parts {
                    match part["type"].as_str() {
                        Some("text") => {
                            if let Some(text) = part["text"].as_str() {
                                prompt.push_str(text);
                            }
                        }
                        Some("image_url") => {
                            if let Some(url) = part["image_url"]["url"].as_str() {
                                image = Some(ImagePayload {
                                    data_uri: url.to_string(),
                                    digest: hex::encode(Sha256::digest(url.as_bytes())),
                                });
                            }
                        }
                        _ => {}
                    }
                }
            }
            _ => {}
        }
    }
    ChatRequest {
        model: body.model.clone(),
        prompt_text: prompt,
        image,
        temperature: body.temperature,
    }
}

async fn handle_chat(
    State(state): State<Arc<ServerState>>,
    Json(body): Json<WireChatRequest>,
) -> Result<Json<serde_json::Value>, (StatusCode, String)> {
    state.chat_requests.fetch_add(1, Ordering::SeqCst);
    let req = parse_wire_request(&body);
    match state.chat.chat(&req).await {
        Ok(text) => Ok(Json(serde_json::json!({
            "choices": [{"message": {"role": "assistant", "content": text}}]
        }))),
        Err(GatewayError::Endpoint { status: Some(code), message }) => Err((
            StatusCode::from_u16(code).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR),
            message,
        )),
        Err(other) => Err((StatusCode::INTERNAL_SERVER_ERROR, other.to_string())),
    }
}

#[derive(Deserialize)]
struct WireEmbedRequest {
    #[serde(default)]
    input: Vec<String>,
}

async fn handle_embeddings(
    State(state): State<Arc<ServerState>>,
    Json(body): Json<WireEmbedRequest>,
) -> Result<Json<serde_json::Value>, (StatusCode, String)> {
    match state.embedder.embed(&body.input).await {
        Ok(vectors) => {
            let data: Vec<serde_json::Value> = vectors
                .into_iter()
                .enumerate()
                .map(|(index, embedding)| serde_json::json!({"index": index, "embedding": embedding}))
                .collect();
            Ok(Json(serde_json::json!({"data": data})))
        }
        Err(e) => Err((StatusCode::INTERNAL_SERVER_ERROR, e.to_string())),
    }
}
