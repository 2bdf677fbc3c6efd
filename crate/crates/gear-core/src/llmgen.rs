//! The generate step: obtain candidate terms for a definition from a
//! chat-completion endpoint, with bounded concurrency, retries, a persistent
//! response cache, and a deterministic mock for offline runs.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::prompt::{fallback_candidates, parse_candidates, render_prompt, CandidateSet, PromptSpec};

/// Settings for the generation client.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub endpoint: String,
    pub model_id: String,
    pub temperature: f64,
    pub max_retries: u32,
    #[serde(with = "duration_secs")]
    pub timeout: Duration,
    pub concurrency_limit: usize,
    /// Base delay for exponential backoff after transport failures.
    #[serde(with = "duration_secs", default = "default_backoff")]
    pub backoff_base: Duration,
}

fn default_backoff() -> Duration {
    Duration::from_secs(1)
}

mod duration_secs {
    use super::Duration;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> std::result::Result<Duration, D::Error> {
        Ok(Duration::from_secs_f64(f64::deserialize(d)?))
    }
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://localhost:8000/v1".to_string(),
            model_id: "gpt-4o-mini".to_string(),
            temperature: 0.0,
            max_retries: 2,
            timeout: Duration::from_secs(60),
            concurrency_limit: 8,
            backoff_base: default_backoff(),
        }
    }
}

/// One cached generation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerationRecord {
    /// Hash of `(model_id, prompt)`.
    pub cache_key: String,
    pub model_id: String,
    pub prompt: String,
    pub raw_response: String,
    pub candidates: CandidateSet,
    /// Unix seconds; excluded from cache fingerprints.
    pub created_at: u64,
}

pub fn cache_key(model_id: &str, prompt: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(model_id.as_bytes());
    hasher.update([0]);
    hasher.update(prompt.as_bytes());
    hex::encode(hasher.finalize())
}

pub(crate) fn backoff(base: Duration, attempt: u32) -> Duration {
    let exp = base.saturating_mul(1 << attempt.saturating_sub(1).min(6));
    let jitter = rand::thread_rng().gen_range(0..=base.as_millis().max(1) as u64 / 2);
    exp + Duration::from_millis(jitter)
}

pub(crate) fn retry_backoff(attempt: u32) -> Duration {
    backoff(Duration::from_secs(1), attempt)
}

/// A chat-completion endpoint. `complete` performs one request.
pub trait ChatProvider: Send + Sync {
    fn model_id(&self) -> &str;
    fn complete(&self, prompt: &str) -> Result<String>;
    /// Total requests served so far.
    fn calls(&self) -> usize;
}

/// Counting semaphore bounding in-flight requests.
struct Gate {
    limit: usize,
    in_use: Mutex<usize>,
    cv: Condvar,
}

struct GatePermit<'a>(&'a Gate);

impl Gate {
    fn new(limit: usize) -> Self {
        Self {
            limit: limit.max(1),
            in_use: Mutex::new(0),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> GatePermit<'_> {
        let mut n = self.in_use.lock().unwrap();
        while *n >= self.limit {
            n = self.cv.wait(n).unwrap();
        }
        *n += 1;
        GatePermit(self)
    }
}

impl Drop for GatePermit<'_> {
    fn drop(&mut self) {
        let mut n = self.0.in_use.lock().unwrap();
        *n -= 1;
        self.0.cv.notify_one();
    }
}

/// Render the bp-style JSON a well-behaved model would return: the mapped
/// terms first, then seeded distractor tokens. Deterministic under
/// `(table, noise_seed, definition)`.
pub fn mock_response(
    table: &BTreeMap<String, Vec<String>>,
    noise_seed: u64,
    definition: &str,
) -> String {
    let mut terms: Vec<String> = table.get(definition).cloned().unwrap_or_default();
    let mut hasher = Sha256::new();
    hasher.update(noise_seed.to_le_bytes());
    hasher.update(definition.as_bytes());
    let key: [u8; 32] = hasher.finalize().into();
    let mut rng = ChaCha8Rng::from_seed(key);
    let n_distractors = if terms.is_empty() { 5 } else { 4 };
    for _ in 0..n_distractors {
        terms.push(format!("zq{:06x}", rng.next_u32() & 0xff_ffff));
    }
    serde_json::json!({ "terms": terms }).to_string()
}

/// Deterministic chat provider backed by a definition-to-terms table.
///
/// The definition is recovered from the rendered prompt; unknown
/// definitions yield distractors only. An optional artificial latency lets
/// tests observe the concurrency gauge.
pub struct MockChatProvider {
    table: BTreeMap<String, Vec<String>>,
    noise_seed: u64,
    model: String,
    latency: Duration,
    calls: AtomicUsize,
    in_flight: AtomicUsize,
    max_in_flight: AtomicUsize,
    log: Mutex<Vec<String>>,
}

impl MockChatProvider {
    pub fn new(table: BTreeMap<String, Vec<String>>, noise_seed: u64) -> Self {
        Self {
            table,
            noise_seed,
            model: "mock-chat".to_string(),
            latency: Duration::ZERO,
            calls: AtomicUsize::new(0),
            in_flight: AtomicUsize::new(0),
            max_in_flight: AtomicUsize::new(0),
            log: Mutex::new(Vec::new()),
        }
    }

    pub fn with_latency(mut self, latency: Duration) -> Self {
        self.latency = latency;
        self
    }

    /// Highest number of simultaneously in-flight requests observed.
    pub fn max_in_flight(&self) -> usize {
        self.max_in_flight.load(Ordering::SeqCst)
    }

    /// Definitions of every request served, in call order.
    pub fn request_log(&self) -> Vec<String> {
        self.log.lock().unwrap().clone()
    }

    fn extract_definition<'a>(&self, prompt: &'a str) -> &'a str {
        const PREFIX: &str = "Given the definition ";
        const SUFFIX: &str = ", generate a list of ";
        if let Some(start) = prompt.find(PREFIX) {
            let rest = &prompt[start + PREFIX.len()..];
            if let Some(end) = rest.find(SUFFIX) {
                return &rest[..end];
            }
        }
        prompt
    }
}

impl ChatProvider for MockChatProvider {
    fn model_id(&self) -> &str {
        &self.model
    }

    fn complete(&self, prompt: &str) -> Result<String> {
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.max_in_flight.fetch_max(now, Ordering::SeqCst);
        if !self.latency.is_zero() {
            std::thread::sleep(self.latency);
        }
        self.calls.fetch_add(1, Ordering::SeqCst);
        let definition = self.extract_definition(prompt).to_string();
        self.log.lock().unwrap().push(definition.clone());
        let response = mock_response(&self.table, self.noise_seed, &definition);
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
        Ok(response)
    }

    fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

/// Chat-completions endpoint client. One `complete` call is one request;
/// retry policy lives in [`Generator`].
pub struct HttpChatProvider {
    endpoint: String,
    model: String,
    temperature: f64,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
    calls: AtomicUsize,
}

impl HttpChatProvider {
    pub fn new(config: &GenerationConfig) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| Error::Generation {
                definition: String::new(),
                reason: e.to_string(),
            })?;
        Ok(Self {
            endpoint: config.endpoint.trim_end_matches('/').to_string(),
            model: config.model_id.clone(),
            temperature: config.temperature,
            api_key: std::env::var("GEAR_API_KEY").ok(),
            client,
            calls: AtomicUsize::new(0),
        })
    }
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Deserialize)]
struct ChatMessage {
    content: String,
}

impl ChatProvider for HttpChatProvider {
    fn model_id(&self) -> &str {
        &self.model
    }

    fn complete(&self, prompt: &str) -> Result<String> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let url = format!("{}/chat/completions", self.endpoint);
        let body = serde_json::json!({
            "model": self.model,
            "messages": [{ "role": "user", "content": prompt }],
            "temperature": self.temperature,
        });
        let mut req = self.client.post(&url).json(&body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req
            .send()
            .and_then(|r| r.error_for_status())
            .map_err(|e| Error::Generation {
                definition: String::new(),
                reason: e.to_string(),
            })?;
        let parsed: ChatResponse = resp.json().map_err(|e| Error::Generation {
            definition: String::new(),
            reason: format!("bad response: {e}"),
        })?;
        parsed
            .choices
            .first()
            .map(|c| c.message.content.clone())
            .ok_or_else(|| Error::Generation {
                definition: String::new(),
                reason: "response had no choices".into(),
            })
    }

    fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

/// Generation front-end: render, call, parse, cache.
pub struct Generator {
    provider: Arc<dyn ChatProvider>,
    config: GenerationConfig,
    cache_dir: Option<PathBuf>,
    mem: Mutex<std::collections::HashMap<String, CandidateSet>>,
    gate: Gate,
    /// Records touched this run, keyed by cache key; value is the response
    /// hash. Timestamps never enter the fingerprint.
    used: Mutex<BTreeMap<String, String>>,
    cache_hits: AtomicUsize,
}

impl Generator {
    pub fn new(provider: Arc<dyn ChatProvider>, config: GenerationConfig) -> Self {
        let gate = Gate::new(config.concurrency_limit);
        Self {
            provider,
            config,
            cache_dir: None,
            mem: Mutex::new(std::collections::HashMap::new()),
            gate,
            used: Mutex::new(BTreeMap::new()),
            cache_hits: AtomicUsize::new(0),
        }
    }

    pub fn with_cache_dir(mut self, dir: PathBuf) -> Result<Self> {
        std::fs::create_dir_all(&dir)?;
        self.cache_dir = Some(dir);
        Ok(self)
    }

    pub fn provider_calls(&self) -> usize {
        self.provider.calls()
    }

    pub fn cache_hits(&self) -> usize {
        self.cache_hits.load(Ordering::SeqCst)
    }

    /// Content hash over the records this run touched, order-independent
    /// and timestamp-free.
    pub fn fingerprint(&self) -> String {
        let used = self.used.lock().unwrap();
        let mut hasher = Sha256::new();
        for (key, response_hash) in used.iter() {
            hasher.update(key.as_bytes());
            hasher.update([0]);
            hasher.update(response_hash.as_bytes());
            hasher.update([0]);
        }
        hex::encode(hasher.finalize())
    }

    fn record_path(&self, key: &str) -> Option<PathBuf> {
        self.cache_dir.as_ref().map(|d| d.join(format!("{key}.json")))
    }

    fn lookup(&self, key: &str) -> Option<(CandidateSet, String)> {
        if let Some(cs) = self.mem.lock().unwrap().get(key) {
            return Some((cs.clone(), cs.raw_response.clone()));
        }
        let path = self.record_path(key)?;
        let text = std::fs::read_to_string(path).ok()?;
        let record: GenerationRecord = serde_json::from_str(&text).ok()?;
        let raw = record.raw_response.clone();
        self.mem
            .lock()
            .unwrap()
            .insert(key.to_string(), record.candidates.clone());
        Some((record.candidates, raw))
    }

    fn store(&self, key: &str, prompt: &str, raw: &str, candidates: &CandidateSet) -> Result<()> {
        self.mem
            .lock()
            .unwrap()
            .insert(key.to_string(), candidates.clone());
        if let Some(path) = self.record_path(key) {
            let record = GenerationRecord {
                cache_key: key.to_string(),
                model_id: self.provider.model_id().to_string(),
                prompt: prompt.to_string(),
                raw_response: raw.to_string(),
                candidates: candidates.clone(),
                created_at: std::time::SystemTime::now()
                    .duration_since(std::time::UNIX_EPOCH)
                    .map(|d| d.as_secs())
                    .unwrap_or(0),
            };
            let text = serde_json::to_string(&record)
                .map_err(|e| Error::CorruptCache(e.to_string()))?;
            std::fs::write(path, text)?;
        }
        Ok(())
    }

    fn mark_used(&self, key: &str, raw: &str) {
        self.used
            .lock()
            .unwrap()
            .insert(key.to_string(), hex::encode(Sha256::digest(raw.as_bytes())));
    }

    /// Candidate terms for one definition: cached if present, otherwise
    /// rendered, requested, parsed, and stored. Parse failures retry with
    /// the identical prompt, then fall back to line parsing (flagged
    /// degraded). Transport failures retry with exponential backoff.
    pub fn generate(&self, spec: &PromptSpec, definition: &str) -> Result<CandidateSet> {
        let prompt = render_prompt(spec, definition)?;
        let key = cache_key(self.provider.model_id(), &prompt);
        if let Some((cached, raw)) = self.lookup(&key) {
            self.cache_hits.fetch_add(1, Ordering::SeqCst);
            self.mark_used(&key, &raw);
            return Ok(cached);
        }

        let mut last_raw: Option<String> = None;
        let mut transport_err = String::new();
        for attempt in 0..=self.config.max_retries {
            let raw = {
                let _permit = self.gate.acquire();
                self.provider.complete(&prompt)
            };
            match raw {
                Ok(raw) => match parse_candidates(&raw, spec.variant, spec.k, definition) {
                    Ok(cs) => {
                        self.store(&key, &prompt, &raw, &cs)?;
                        self.mark_used(&key, &raw);
                        return Ok(cs);
                    }
                    Err(_) => last_raw = Some(raw),
                },
                Err(e) => {
                    transport_err = e.to_string();
                    if attempt < self.config.max_retries {
                        std::thread::sleep(backoff(self.config.backoff_base, attempt + 1));
                    }
                }
            }
        }

        if let Some(raw) = last_raw {
            // Persistent parse failure: best-effort line parse, degraded.
            log::warn!("falling back to line parsing for definition {definition:?}");
            let cs = fallback_candidates(&raw, spec.variant, spec.k, definition).map_err(|_| {
                Error::Generation {
                    definition: definition.to_string(),
                    reason: "response never parsed, fallback found nothing".into(),
                }
            })?;
            self.store(&key, &prompt, &raw, &cs)?;
            self.mark_used(&key, &raw);
            return Ok(cs);
        }
        Err(Error::Generation {
            definition: definition.to_string(),
            reason: format!(
                "transport failed after {} retries: {transport_err}",
                self.config.max_retries
            ),
        })
    }
}
