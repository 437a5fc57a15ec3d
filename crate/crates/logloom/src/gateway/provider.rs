//! Model providers: a real HTTP chat/embeddings backend and a scripted mock
//! for hermetic runs.

use std::path::Path;
use std::sync::Mutex;

use serde::Deserialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub trait Provider: Send + Sync {
    /// Stable identity used in cache keys.
    fn id(&self) -> String;
    fn complete(&self, prompt: &str, temperature: f32) -> Result<String>;
    fn embed(&self, text: &str) -> Result<Vec<f32>>;
    fn embedding_dim(&self) -> usize;
}

fn provider_err(provider: &str, message: impl Into<String>) -> Error {
    Error::Provider {
        provider: provider.to_string(),
        message: message.into(),
    }
}

/// OpenAI-style HTTP backend. The key comes from the environment, never from
/// config files.
pub struct HttpProvider {
    endpoint: String,
    completion_model: String,
    embedding_model: String,
    api_key: String,
    dim: usize,
    client: reqwest::blocking::Client,
}

impl HttpProvider {
    pub fn new(
        endpoint: impl Into<String>,
        completion_model: impl Into<String>,
        embedding_model: impl Into<String>,
        api_key: impl Into<String>,
        embedding_dim: usize,
    ) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(std::time::Duration::from_secs(120))
            .build()
            .map_err(|e| provider_err("http", format!("client construction: {e}")))?;
        Ok(HttpProvider {
            endpoint: endpoint.into().trim_end_matches('/').to_string(),
            completion_model: completion_model.into(),
            embedding_model: embedding_model.into(),
            api_key: api_key.into(),
            dim: embedding_dim,
            client,
        })
    }

    fn post(&self, path: &str, body: serde_json::Value) -> Result<serde_json::Value> {
        let url = format!("{}{}", self.endpoint, path);
        let resp = self
            .client
            .post(&url)
            .bearer_auth(&self.api_key)
            .json(&body)
            .send()
            .map_err(|e| provider_err("http", format!("{url}: {e}")))?;
        let status = resp.status();
        let text = resp
            .text()
            .map_err(|e| provider_err("http", format!("{url}: reading body: {e}")))?;
        if !status.is_success() {
            return Err(provider_err(
                "http",
                format!("{url}: status {status}: {text}"),
            ));
        }
        serde_json::from_str(&text)
            .map_err(|e| provider_err("http", format!("{url}: malformed response: {e}")))
    }
}

impl Provider for HttpProvider {
    fn id(&self) -> String {
        format!("http:{}:{}", self.completion_model, self.embedding_model)
    }

    fn complete(&self, prompt: &str, temperature: f32) -> Result<String> {
        let body = serde_json::json!({
            "model": self.completion_model,
            "temperature": temperature,
            "messages": [{"role": "user", "content": prompt}],
        });
        let resp = self.post("/chat/completions", body)?;
        resp["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| provider_err("http", "completion response lacks message content"))
    }

    fn embed(&self, text: &str) -> Result<Vec<f32>> {
        let body = serde_json::json!({
            "model": self.embedding_model,
            "input": text,
        });
        let resp = self.post("/embeddings", body)?;
        let arr = resp["data"][0]["embedding"]
            .as_array()
            .ok_or_else(|| provider_err("http", "embedding response lacks a vector"))?;
        arr.iter()
            .map(|v| {
                v.as_f64()
                    .map(|f| f as f32)
                    .ok_or_else(|| provider_err("http", "embedding vector holds a non-number"))
            })
            .collect()
    }

    fn embedding_dim(&self) -> usize {
        self.dim
    }
}

/// One scripted exchange: the entry answers any prompt containing every
/// `match` pattern (whitespace-normalized). Entries are consulted in order;
/// non-sticky entries answer once.
#[derive(Debug, Clone, Deserialize)]
pub struct TranscriptEntry {
    #[serde(rename = "match")]
    pub patterns: Vec<String>,
    #[serde(default)]
    pub response: Option<String>,
    /// Authoring convenience: a JSON value serialized into the response.
    #[serde(default)]
    pub response_json: Option<serde_json::Value>,
    #[serde(default)]
    pub sticky: bool,
}

#[derive(Debug, Deserialize)]
struct TranscriptDoc {
    #[serde(default)]
    embedding_dim: Option<usize>,
    entries: Vec<TranscriptEntry>,
}

struct MockEntry {
    patterns: Vec<String>,
    response: String,
    sticky: bool,
    used: bool,
}

/// Deterministic scripted provider. Prompts are matched against the
/// transcript by normalized substring patterns; unknown prompts fail loudly.
/// Embeddings are hash-derived unit vectors, so identical texts embed
/// identically and distinct texts land far apart.
pub struct MockProvider {
    entries: Mutex<Vec<MockEntry>>,
    dim: usize,
}

pub fn normalize_prompt(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

impl MockProvider {
    pub fn from_json(text: &str) -> Result<Self> {
        let doc: TranscriptDoc =
            serde_json::from_str(text).map_err(|e| Error::Parse(format!("transcript: {e}")))?;
        let mut entries = Vec::with_capacity(doc.entries.len());
        for (i, e) in doc.entries.into_iter().enumerate() {
            let response = match (e.response, e.response_json) {
                (Some(r), None) => r,
                (None, Some(v)) => serde_json::to_string_pretty(&v)
                    .expect("transcript JSON value re-serializes"),
                _ => {
                    return Err(Error::Parse(format!(
                        "transcript entry {i}: exactly one of response/response_json required"
                    )))
                }
            };
            if e.patterns.is_empty() {
                return Err(Error::Parse(format!(
                    "transcript entry {i}: empty match pattern list"
                )));
            }
            entries.push(MockEntry {
                patterns: e.patterns.iter().map(|p| normalize_prompt(p)).collect(),
                response,
                sticky: e.sticky,
                used: false,
            });
        }
        Ok(MockProvider {
            entries: Mutex::new(entries),
            dim: doc.embedding_dim.unwrap_or(16),
        })
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Entries that never answered; useful for asserting a scenario consumed
    /// its script.
    pub fn unused_entries(&self) -> usize {
        self.entries
            .lock()
            .expect("transcript lock poisoned")
            .iter()
            .filter(|e| !e.used && !e.sticky)
            .count()
    }
}

impl Provider for MockProvider {
    fn id(&self) -> String {
        "mock".into()
    }

    fn complete(&self, prompt: &str, _temperature: f32) -> Result<String> {
        let normalized = normalize_prompt(prompt);
        let mut entries = self.entries.lock().expect("transcript lock poisoned");
        for e in entries.iter_mut() {
            if (e.sticky || !e.used) && e.patterns.iter().all(|p| normalized.contains(p.as_str()))
            {
                e.used = true;
                return Ok(e.response.clone());
            }
        }
        let head: String = normalized.chars().take(220).collect();
        Err(provider_err(
            "mock",
            format!(
                "no transcript entry matches prompt (normalized head: {head:?}); \
                 {} entries total",
                entries.len()
            ),
        ))
    }

    fn embed(&self, text: &str) -> Result<Vec<f32>> {
        Ok(hash_embedding(text, self.dim))
    }

    fn embedding_dim(&self) -> usize {
        self.dim
    }
}

/// Unit vector derived from the text digest: stable across runs with no
/// network involved.
pub fn hash_embedding(text: &str, dim: usize) -> Vec<f32> {
    let mut out: Vec<f32> = Vec::with_capacity(dim);
    let mut counter: u32 = 0;
    while out.len() < dim {
        let mut h = Sha256::new();
        h.update(text.as_bytes());
        h.update(counter.to_le_bytes());
        let digest = h.finalize();
        for chunk in digest.chunks_exact(4) {
            if out.len() == dim {
                break;
            }
            let v = u32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
            out.push((v as f64 / u32::MAX as f64 * 2.0 - 1.0) as f32);
        }
        counter += 1;
    }
    let norm = out.iter().map(|x| (*x as f64) * (*x as f64)).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in &mut out {
            *x = (*x as f64 / norm) as f32;
        }
    }
    out
}
