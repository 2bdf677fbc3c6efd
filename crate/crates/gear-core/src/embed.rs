//! The embed step: map terms and definitions to vectors through a provider
//! (HTTP endpoint or deterministic mock), with instruction prefixes and a
//! packed on-disk cache.
//!
//! Vectors are stored exactly as the provider returned them; cosine
//! normalizes at comparison time, so pooling always operates on raw model
//! outputs.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const GENERIC_QUERY_PREFIX: &str = "Represent the sentence: ";
pub const GENERIC_DOC_PREFIX: &str = "Represent the word: ";
pub const DICTIONARY_QUERY_PREFIX: &str = "Represent the dictionary definition: ";
pub const DICTIONARY_DOC_PREFIX: &str = "Represent the sentence: the dictionary entry: ";

/// Instruction style prepended to texts before embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum InstructionVariant {
    #[default]
    None,
    Generic,
    Dictionary,
}

impl fmt::Display for InstructionVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::None => write!(f, "none"),
            Self::Generic => write!(f, "generic"),
            Self::Dictionary => write!(f, "dictionary"),
        }
    }
}

impl std::str::FromStr for InstructionVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(Self::None),
            "generic" => Ok(Self::Generic),
            "dictionary" => Ok(Self::Dictionary),
            other => Err(Error::InvalidConfig(format!(
                "unknown instruction variant {other:?}"
            ))),
        }
    }
}

/// Which side of the retrieval pair a text belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TextRole {
    /// Definitions and pooled queries.
    Query,
    /// Vocabulary terms and generated candidate terms.
    Document,
}

/// Prefixes applied per role before embedding.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionConfig {
    pub query_prefix: String,
    pub doc_prefix: String,
    pub variant: InstructionVariant,
}

impl InstructionConfig {
    pub fn for_variant(variant: InstructionVariant) -> Self {
        match variant {
            InstructionVariant::None => Self {
                query_prefix: String::new(),
                doc_prefix: String::new(),
                variant,
            },
            InstructionVariant::Generic => Self {
                query_prefix: GENERIC_QUERY_PREFIX.to_string(),
                doc_prefix: GENERIC_DOC_PREFIX.to_string(),
                variant,
            },
            InstructionVariant::Dictionary => Self {
                query_prefix: DICTIONARY_QUERY_PREFIX.to_string(),
                doc_prefix: DICTIONARY_DOC_PREFIX.to_string(),
                variant,
            },
        }
    }

    pub fn prefix(&self, role: TextRole) -> &str {
        match role {
            TextRole::Query => &self.query_prefix,
            TextRole::Document => &self.doc_prefix,
        }
    }
}

/// A source of embeddings. Implementations must be deterministic for a
/// fixed input within one run.
pub trait EmbeddingProvider: Send + Sync {
    fn model_id(&self) -> &str;
    fn dimension(&self) -> usize;
    /// One vector per input text, in request order.
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f32>>>;
    /// Batch requests served so far.
    fn calls(&self) -> usize;
}

/// Deterministic test double: a unit-norm pseudo-random vector derived from
/// a hash of `(seed, text)`. Equal inputs give equal vectors; distinct
/// inputs are near-orthogonal in expectation at moderate dimensions.
pub struct MockEmbedder {
    seed: u64,
    dim: usize,
    model: String,
    calls: AtomicUsize,
    log: Mutex<Vec<String>>,
}

impl MockEmbedder {
    pub fn new(seed: u64, dim: usize) -> Self {
        Self {
            seed,
            dim,
            model: format!("mock-embed-{dim}"),
            calls: AtomicUsize::new(0),
            log: Mutex::new(Vec::new()),
        }
    }

    pub fn embed_one(&self, text: &str) -> Vec<f32> {
        mock_vector(self.seed, self.dim, text)
    }

    /// Number of provider calls made (one per batch).
    pub fn call_count(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    /// Every text embedded so far, in call order.
    pub fn embedded_texts(&self) -> Vec<String> {
        self.log.lock().unwrap().clone()
    }
}

/// Unit-norm vector from a ChaCha stream keyed by `sha256(seed, text)`.
pub fn mock_vector(seed: u64, dim: usize, text: &str) -> Vec<f32> {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(text.as_bytes());
    let key: [u8; 32] = hasher.finalize().into();
    let mut rng = ChaCha8Rng::from_seed(key);
    let mut v: Vec<f32> = (0..dim)
        .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng) as f32)
        .collect();
    let norm = v.iter().map(|x| (*x as f64) * (*x as f64)).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in &mut v {
            *x = (*x as f64 / norm) as f32;
        }
    }
    v
}

impl EmbeddingProvider for MockEmbedder {
    fn model_id(&self) -> &str {
        &self.model
    }

    fn dimension(&self) -> usize {
        self.dim
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f32>>> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.log.lock().unwrap().extend(texts.iter().cloned());
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }

    fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

/// Packed embedding cache: a text-to-row map over a row-major f32 matrix.
///
/// On disk it is three files: `manifest.json` (model, dimension, count,
/// instruction variant, checksum), `vectors.f32le` (packed little-endian
/// rows) and `rows.txt` (one JSON-encoded text per line, line i = row i).
pub struct EmbeddingCache {
    pub model_id: String,
    pub dimension: usize,
    pub variant: InstructionVariant,
    rows: HashMap<String, usize>,
    row_texts: Vec<String>,
    matrix: Matrix,
}

#[derive(Serialize, Deserialize)]
struct CacheManifest {
    model_id: String,
    dimension: usize,
    count: usize,
    instruction_variant: InstructionVariant,
    checksum: String,
}

impl EmbeddingCache {
    pub fn new(model_id: &str, dimension: usize, variant: InstructionVariant) -> Self {
        Self {
            model_id: model_id.to_string(),
            dimension,
            variant,
            rows: HashMap::new(),
            row_texts: Vec::new(),
            matrix: Matrix::new(dimension),
        }
    }

    pub fn len(&self) -> usize {
        self.row_texts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.row_texts.is_empty()
    }

    pub fn get(&self, text: &str) -> Option<&[f32]> {
        self.rows.get(text).map(|&i| self.matrix.row(i))
    }

    /// Cached texts in row order.
    pub fn texts(&self) -> &[String] {
        &self.row_texts
    }

    pub fn insert(&mut self, text: &str, vector: &[f32]) -> Result<()> {
        if vector.len() != self.dimension {
            return Err(Error::DimensionMismatch {
                expected: self.dimension,
                got: vector.len(),
            });
        }
        if self.rows.contains_key(text) {
            return Ok(());
        }
        self.matrix.push_row(vector)?;
        self.rows.insert(text.to_string(), self.row_texts.len());
        self.row_texts.push(text.to_string());
        Ok(())
    }

    /// Content hash over sorted `(text, vector bytes)` pairs; independent of
    /// insertion order.
    pub fn fingerprint(&self) -> String {
        let mut texts: Vec<&String> = self.row_texts.iter().collect();
        texts.sort();
        let mut hasher = Sha256::new();
        hasher.update(self.model_id.as_bytes());
        hasher.update([0]);
        hasher.update(self.variant.to_string().as_bytes());
        for t in texts {
            hasher.update(t.as_bytes());
            hasher.update([0]);
            let row = self.matrix.row(self.rows[t.as_str()]);
            for v in row {
                hasher.update(v.to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let bytes = self.matrix.to_le_bytes();
        let manifest = CacheManifest {
            model_id: self.model_id.clone(),
            dimension: self.dimension,
            count: self.row_texts.len(),
            instruction_variant: self.variant,
            checksum: hex::encode(Sha256::digest(&bytes)),
        };
        std::fs::write(
            dir.join("manifest.json"),
            serde_json::to_string_pretty(&manifest)
                .map_err(|e| Error::CorruptCache(e.to_string()))?,
        )?;
        std::fs::write(dir.join("vectors.f32le"), &bytes)?;
        let mut rows = String::new();
        for t in &self.row_texts {
            rows.push_str(
                &serde_json::to_string(t).map_err(|e| Error::CorruptCache(e.to_string()))?,
            );
            rows.push('\n');
        }
        std::fs::write(dir.join("rows.txt"), rows)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_text = std::fs::read_to_string(dir.join("manifest.json"))?;
        let manifest: CacheManifest = serde_json::from_str(&manifest_text)
            .map_err(|e| Error::CorruptCache(format!("manifest: {e}")))?;
        let bytes = std::fs::read(dir.join("vectors.f32le"))?;
        if hex::encode(Sha256::digest(&bytes)) != manifest.checksum {
            return Err(Error::CorruptCache("vector checksum mismatch".into()));
        }
        let matrix = Matrix::from_le_bytes(manifest.dimension, manifest.count, &bytes)?;
        let rows_text = std::fs::read_to_string(dir.join("rows.txt"))?;
        let mut row_texts = Vec::with_capacity(manifest.count);
        for line in rows_text.lines() {
            let t: String = serde_json::from_str(line)
                .map_err(|e| Error::CorruptCache(format!("rows.txt: {e}")))?;
            row_texts.push(t);
        }
        if row_texts.len() != manifest.count {
            return Err(Error::CorruptCache(format!(
                "rows.txt holds {} texts, manifest says {}",
                row_texts.len(),
                manifest.count
            )));
        }
        let rows = row_texts
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Ok(Self {
            model_id: manifest.model_id,
            dimension: manifest.dimension,
            variant: manifest.instruction_variant,
            rows,
            row_texts,
            matrix,
        })
    }
}

/// Embedding front-end: applies instruction prefixes, serves hits from the
/// cache, and batches misses to the provider.
pub struct Embedder {
    provider: std::sync::Arc<dyn EmbeddingProvider>,
    instruction: InstructionConfig,
    cache: Mutex<EmbeddingCache>,
    batch_size: usize,
}

pub const DEFAULT_EMBED_BATCH: usize = 64;

impl Embedder {
    pub fn new(
        provider: std::sync::Arc<dyn EmbeddingProvider>,
        instruction: InstructionConfig,
    ) -> Self {
        let cache = EmbeddingCache::new(provider.model_id(), provider.dimension(), instruction.variant);
        Self {
            provider,
            instruction,
            cache: Mutex::new(cache),
            batch_size: DEFAULT_EMBED_BATCH,
        }
    }

    pub fn with_cache(
        provider: std::sync::Arc<dyn EmbeddingProvider>,
        instruction: InstructionConfig,
        cache: EmbeddingCache,
    ) -> Result<Self> {
        if cache.dimension != provider.dimension() {
            return Err(Error::DimensionMismatch {
                expected: provider.dimension(),
                got: cache.dimension,
            });
        }
        if cache.model_id != provider.model_id() {
            return Err(Error::CorruptCache(format!(
                "cache was built with model {:?}, provider is {:?}",
                cache.model_id,
                provider.model_id()
            )));
        }
        Ok(Self {
            provider,
            instruction,
            cache: Mutex::new(cache),
            batch_size: DEFAULT_EMBED_BATCH,
        })
    }

    pub fn batch_size(mut self, n: usize) -> Self {
        self.batch_size = n.max(1);
        self
    }

    pub fn instruction(&self) -> &InstructionConfig {
        &self.instruction
    }

    pub fn dimension(&self) -> usize {
        self.provider.dimension()
    }

    pub fn model_id(&self) -> &str {
        self.provider.model_id()
    }

    pub fn cache_fingerprint(&self) -> String {
        self.cache.lock().unwrap().fingerprint()
    }

    /// Batch requests the provider has served.
    pub fn provider_calls(&self) -> usize {
        self.provider.calls()
    }

    pub fn cache_len(&self) -> usize {
        self.cache.lock().unwrap().len()
    }

    pub fn save_cache(&self, dir: &Path) -> Result<()> {
        self.cache.lock().unwrap().save(dir)
    }

    /// Embed texts under the given role's instruction prefix. Row i of the
    /// result is the vector of `texts[i]`; the provider only sees cache
    /// misses, batched.
    pub fn embed_texts(&self, texts: &[String], role: TextRole) -> Result<Matrix> {
        if texts.is_empty() {
            return Err(Error::Embedding("no texts to embed".into()));
        }
        if texts.iter().any(|t| t.trim().is_empty()) {
            return Err(Error::Embedding("empty text in embed batch".into()));
        }
        let prefix = self.instruction.prefix(role);
        let prefixed: Vec<String> = texts.iter().map(|t| format!("{prefix}{t}")).collect();

        let mut cache = self.cache.lock().unwrap();
        let mut misses: Vec<String> = Vec::new();
        let mut miss_set = std::collections::HashSet::new();
        for t in &prefixed {
            if cache.get(t).is_none() && miss_set.insert(t.clone()) {
                misses.push(t.clone());
            }
        }
        for chunk in misses.chunks(self.batch_size) {
            let vectors = self.provider.embed_batch(chunk)?;
            if vectors.len() != chunk.len() {
                return Err(Error::Embedding(format!(
                    "provider returned {} vectors for {} texts",
                    vectors.len(),
                    chunk.len()
                )));
            }
            for (t, v) in chunk.iter().zip(vectors) {
                if v.len() != cache.dimension {
                    return Err(Error::DimensionMismatch {
                        expected: cache.dimension,
                        got: v.len(),
                    });
                }
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(Error::Embedding(format!(
                        "non-finite embedding for {t:?}"
                    )));
                }
                cache.insert(t, &v)?;
            }
        }
        let mut out = Matrix::with_capacity(cache.dimension, prefixed.len());
        for t in &prefixed {
            out.push_row(cache.get(t).expect("row just inserted"))?;
        }
        Ok(out)
    }
}

/// Chat-completions style embeddings endpoint client.
pub struct HttpEmbedder {
    endpoint: String,
    model: String,
    dimension: usize,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
    max_retries: u32,
    calls: AtomicUsize,
}

impl HttpEmbedder {
    pub fn new(endpoint: &str, model: &str, dimension: usize, timeout: std::time::Duration) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| Error::Embedding(e.to_string()))?;
        Ok(Self {
            endpoint: endpoint.trim_end_matches('/').to_string(),
            model: model.to_string(),
            dimension,
            api_key: std::env::var("GEAR_EMBED_API_KEY")
                .or_else(|_| std::env::var("GEAR_API_KEY"))
                .ok(),
            client,
            max_retries: 3,
            calls: AtomicUsize::new(0),
        })
    }
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingRow>,
}

#[derive(Deserialize)]
struct EmbeddingRow {
    #[serde(default)]
    index: Option<usize>,
    embedding: Vec<f32>,
}

impl EmbeddingProvider for HttpEmbedder {
    fn model_id(&self) -> &str {
        &self.model
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f32>>> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let url = format!("{}/embeddings", self.endpoint);
        let body = serde_json::json!({ "model": self.model, "input": texts });
        let mut last_err = String::new();
        for attempt in 0..=self.max_retries {
            if attempt > 0 {
                std::thread::sleep(crate::llmgen::retry_backoff(attempt));
            }
            let mut req = self.client.post(&url).json(&body);
            if let Some(key) = &self.api_key {
                req = req.bearer_auth(key);
            }
            match req.send().and_then(|r| r.error_for_status()) {
                Ok(resp) => {
                    let parsed: EmbeddingResponse = resp
                        .json()
                        .map_err(|e| Error::Embedding(format!("bad response: {e}")))?;
                    let mut rows = parsed.data;
                    if rows.iter().all(|r| r.index.is_some()) {
                        rows.sort_by_key(|r| r.index.unwrap());
                    }
                    return Ok(rows.into_iter().map(|r| r.embedding).collect());
                }
                Err(e) => last_err = e.to_string(),
            }
        }
        Err(Error::Embedding(format!(
            "embedding request failed after {} retries: {last_err}; texts: {:?}",
            self.max_retries,
            texts.iter().take(3).collect::<Vec<_>>()
        )))
    }

    fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}
