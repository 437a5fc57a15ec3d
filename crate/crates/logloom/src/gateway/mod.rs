//! Everything that talks to a language model goes through here: sampling,
//! caching, majority voting, the generate-check-repair loop, and the few-shot
//! example store. Induction code never touches a provider directly, which is
//! what keeps runs replayable from the cache alone.

mod cache;
mod provider;

pub use cache::CompletionCache;
pub use provider::{hash_embedding, normalize_prompt, HttpProvider, MockProvider, Provider};

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// How many candidates to draw for one decision and at what temperature.
/// Styles beyond the first are appended to successive samples so the model
/// sees a slightly different framing each time.
#[derive(Debug, Clone)]
pub struct SamplingSpec {
    pub n_samples: usize,
    pub temperature: f32,
    pub prompt_variants: Vec<String>,
}

impl SamplingSpec {
    pub fn new(n_samples: usize, temperature: f32) -> Result<Self> {
        if n_samples == 0 {
            return Err(Error::Config("n_samples must be at least 1".into()));
        }
        Ok(SamplingSpec {
            n_samples,
            temperature,
            prompt_variants: default_variants(),
        })
    }

    /// One deterministic sample, no restyling.
    pub fn single() -> Self {
        SamplingSpec {
            n_samples: 1,
            temperature: 0.0,
            prompt_variants: Vec::new(),
        }
    }
}

fn default_variants() -> Vec<String> {
    vec![
        String::new(),
        "Think carefully about edge cases before answering.".into(),
        "Answer as a precise, experienced log analyst.".into(),
    ]
}

pub struct Gateway {
    provider: Box<dyn Provider>,
    cache: CompletionCache,
    calls: AtomicU64,
    hits: AtomicU64,
}

fn digest_key(parts: &[&str]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.as_bytes());
        h.update([0x1f]);
    }
    let out = h.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

impl Gateway {
    pub fn new(provider: Box<dyn Provider>, cache_dir: &std::path::Path) -> Result<Self> {
        Ok(Gateway {
            provider,
            cache: CompletionCache::open(cache_dir)?,
            calls: AtomicU64::new(0),
            hits: AtomicU64::new(0),
        })
    }

    /// Live provider invocations made through this gateway instance.
    pub fn provider_calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    /// Requests answered from the persistent cache.
    pub fn cache_hits(&self) -> u64 {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn cache(&self) -> &CompletionCache {
        &self.cache
    }

    pub fn embedding_dim(&self) -> usize {
        self.provider.embedding_dim()
    }

    /// Draws `spec.n_samples` completions. Each sample is keyed by provider,
    /// temperature, sample index, and full prompt text, so a rerun of the
    /// same request replays entirely from the cache.
    pub fn complete(&self, prompt: &str, spec: &SamplingSpec) -> Result<Vec<String>> {
        if spec.n_samples == 0 {
            return Err(Error::Config("sampling spec drew zero samples".into()));
        }
        let provider_id = self.provider.id();
        let temp_key = format!("{:.4}", spec.temperature);
        let mut out = Vec::with_capacity(spec.n_samples);
        for i in 0..spec.n_samples {
            let styled;
            let effective = if spec.prompt_variants.is_empty() {
                prompt
            } else {
                let variant = &spec.prompt_variants[i % spec.prompt_variants.len()];
                if variant.is_empty() {
                    prompt
                } else {
                    styled = format!("{prompt}\n\n{variant}");
                    &styled
                }
            };
            let key = digest_key(&[&provider_id, &temp_key, &i.to_string(), effective]);
            if let Some(resp) = self.cache.completion(&key) {
                self.hits.fetch_add(1, Ordering::Relaxed);
                out.push(resp);
                continue;
            }
            let resp = self.provider.complete(effective, spec.temperature)?;
            self.calls.fetch_add(1, Ordering::Relaxed);
            self.cache.store_completion(&key, &resp)?;
            out.push(resp);
        }
        Ok(out)
    }

    pub fn complete_one(&self, prompt: &str) -> Result<String> {
        let mut v = self.complete(prompt, &SamplingSpec::single())?;
        Ok(v.pop().expect("single() draws one sample"))
    }

    /// One-sentence natural-language description of an item. Cached by item
    /// identity, so describing the same line twice costs one call.
    pub fn describe(&self, kind: &str, item: &str) -> Result<String> {
        if item.trim().is_empty() {
            return Err(Error::EmptyInput("describe called on empty text".into()));
        }
        let prompt = format!(
            "## TASK: describe-{kind}\n\
             In one short sentence, describe what this {kind} is about. Mention the event \
             and the kinds of values present, not the literal values.\n\n{item}"
        );
        Ok(self.complete_one(&prompt)?.trim().to_string())
    }

    pub fn embed(&self, text: &str) -> Result<Vec<f32>> {
        let key = digest_key(&["embed", &self.provider.id(), text]);
        if let Some(v) = self.cache.embedding(&key) {
            self.hits.fetch_add(1, Ordering::Relaxed);
            return Ok(v);
        }
        let v = self.provider.embed(text)?;
        self.calls.fetch_add(1, Ordering::Relaxed);
        if v.len() != self.provider.embedding_dim() {
            return Err(Error::Provider {
                provider: self.provider.id(),
                message: format!(
                    "embedding dimension {} does not match declared {}",
                    v.len(),
                    self.provider.embedding_dim()
                ),
            });
        }
        self.cache.store_embedding(&key, &v)?;
        Ok(v)
    }
}

/// Most frequent candidate under `key`; ties go to the earliest sample.
pub fn majority_vote<T, K, F>(candidates: &[T], mut key: F) -> Result<&T>
where
    K: std::hash::Hash + Eq,
    F: FnMut(&T) -> K,
{
    if candidates.is_empty() {
        return Err(Error::EmptyInput("majority vote over zero candidates".into()));
    }
    let keys: Vec<K> = candidates.iter().map(|c| key(c)).collect();
    let mut counts: std::collections::HashMap<&K, usize> = std::collections::HashMap::new();
    for k in &keys {
        *counts.entry(k).or_insert(0) += 1;
    }
    let best = counts.values().copied().max().expect("non-empty");
    let winner = keys
        .iter()
        .position(|k| counts[k] == best)
        .expect("some key reaches the maximum");
    Ok(&candidates[winner])
}

/// Generate-check-repair loop. `generate` receives the accumulated
/// diagnostics and produces a candidate; `check` either accepts it or
/// explains what is wrong. Repairable generation errors (parse failures,
/// bad references) become diagnostics too; anything else aborts.
pub fn repair_loop<T>(
    max_iters: usize,
    mut generate: impl FnMut(&[String]) -> Result<T>,
    mut check: impl FnMut(&T) -> std::result::Result<(), String>,
) -> Result<T> {
    let mut diagnostics: Vec<String> = Vec::new();
    for _ in 0..max_iters.max(1) {
        match generate(&diagnostics) {
            Ok(candidate) => match check(&candidate) {
                Ok(()) => return Ok(candidate),
                Err(diag) => diagnostics.push(diag),
            },
            Err(e) if e.is_repairable() => diagnostics.push(e.to_string()),
            Err(e) => return Err(e),
        }
    }
    Err(Error::RepairExhausted {
        iters: max_iters.max(1),
        last: diagnostics.last().cloned().unwrap_or_default(),
    })
}

/// Feedback block appended to a regenerated prompt.
pub fn feedback_block(diagnostics: &[String]) -> String {
    if diagnostics.is_empty() {
        return String::new();
    }
    let mut out = String::from("\n## FEEDBACK\nYour previous answers were rejected:\n");
    for d in diagnostics {
        out.push_str("- ");
        out.push_str(d);
        out.push('\n');
    }
    out.push_str("Produce a corrected answer.\n");
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StoredExample {
    pub description: String,
    pub embedding: Vec<f32>,
    pub prompt: String,
    pub output: String,
}

/// Few-shot memory: accepted decisions indexed by description embedding.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ExampleStore {
    entries: Vec<StoredExample>,
}

impl ExampleStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, example: StoredExample) -> Result<()> {
        if let Some(first) = self.entries.first() {
            if first.embedding.len() != example.embedding.len() {
                return Err(Error::Input(format!(
                    "example embedding dimension {} does not match store dimension {}",
                    example.embedding.len(),
                    first.embedding.len()
                )));
            }
        }
        self.entries.push(example);
        Ok(())
    }

    /// Top-k entries by cosine similarity, most similar first. Stable: equal
    /// similarities keep insertion order.
    pub fn nearest(&self, query: &[f32], k: usize) -> Vec<&StoredExample> {
        let mut scored: Vec<(f64, usize)> = self
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| (cosine_similarity(query, &e.embedding), i))
            .collect();
        scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal));
        scored
            .into_iter()
            .take(k)
            .map(|(_, i)| &self.entries[i])
            .collect()
    }

    pub fn entries(&self) -> &[StoredExample] {
        &self.entries
    }
}

pub fn cosine_similarity(a: &[f32], b: &[f32]) -> f64 {
    let n = a.len().min(b.len());
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for i in 0..n {
        dot += a[i] as f64 * b[i] as f64;
        na += (a[i] as f64).powi(2);
        nb += (b[i] as f64).powi(2);
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na.sqrt() * nb.sqrt())
}

/// Cosine distance clamped to [0, 2]; identical directions give 0.
pub fn cosine_distance(a: &[f32], b: &[f32]) -> f64 {
    1.0 - cosine_similarity(a, b)
}

/// Renders a `## EXAMPLES` block from the nearest stored decisions.
pub fn examples_block(examples: &[&StoredExample]) -> String {
    if examples.is_empty() {
        return String::new();
    }
    let mut out = String::from("\n## EXAMPLES\nEarlier accepted decisions on similar items:\n");
    for (i, e) in examples.iter().enumerate() {
        out.push_str(&format!(
            "\nExample {n} ({desc}):\n{output}\n",
            n = i + 1,
            desc = e.description,
            output = e.output
        ));
    }
    out
}

/// Pulls the model's JSON payload out of a chatty response: the last fenced
/// ```json block wins, otherwise the last top-level JSON value in the text.
pub fn extract_json(text: &str) -> Option<serde_json::Value> {
    if let Some(v) = last_fenced_json(text) {
        return Some(v);
    }
    last_top_level_json(text)
}

fn last_fenced_json(text: &str) -> Option<serde_json::Value> {
    let mut best = None;
    let mut rest = text;
    while let Some(start) = rest.find("```json") {
        let after = &rest[start + "```json".len()..];
        if let Some(end) = after.find("```") {
            if let Ok(v) = serde_json::from_str(after[..end].trim()) {
                best = Some(v);
            }
            rest = &after[end + 3..];
        } else {
            break;
        }
    }
    best
}

fn last_top_level_json(text: &str) -> Option<serde_json::Value> {
    let bytes = text.as_bytes();
    let mut best = None;
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'{' || bytes[i] == b'[' {
            let slice = &text[i..];
            let mut stream = serde_json::Deserializer::from_str(slice)
                .into_iter::<serde_json::Value>();
            match stream.next() {
                Some(Ok(v)) => {
                    let consumed = stream.byte_offset();
                    best = Some(v);
                    i += consumed.max(1);
                    continue;
                }
                _ => {}
            }
        }
        i += 1;
    }
    best
}
