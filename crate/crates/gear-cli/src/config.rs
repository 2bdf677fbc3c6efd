//! Run configuration: one declarative TOML file plus flag overrides, with
//! flags winning. The raw file text (plus any overrides) is echoed into
//! every report for provenance.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use gear_core::corpus::{load_corpus, load_manifest, Corpus, CorpusFormat};
use gear_core::embed::{
    Embedder, EmbeddingCache, EmbeddingProvider, HttpEmbedder, InstructionConfig,
    InstructionVariant, MockEmbedder,
};
use gear_core::eval::{EvalMode, EvalOptions, RankDispersion};
use gear_core::index::Pooling;
use gear_core::llmgen::{
    ChatProvider, GenerationConfig, Generator, HttpChatProvider, MockChatProvider,
};
use gear_core::prompt::PromptVariant;

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct RunConfig {
    pub corpus: CorpusSection,
    #[serde(default)]
    pub split: SplitSection,
    #[serde(default)]
    pub run: RunSection,
    #[serde(default)]
    pub generation: GenerationSection,
    #[serde(default)]
    pub embedding: EmbeddingSection,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct CorpusSection {
    /// Manifest file carrying name, description, and data path.
    pub manifest: Option<String>,
    /// Direct data file, alternative to a manifest.
    pub path: Option<String>,
    #[serde(default)]
    pub format: Option<String>,
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub description: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitSection {
    pub kind: String,
    pub seed: u64,
    pub ratios: [f64; 3],
}

impl Default for SplitSection {
    fn default() -> Self {
        Self {
            kind: "random".into(),
            seed: 0,
            ratios: [0.6, 0.2, 0.2],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSection {
    pub mode: String,
    pub prompt: String,
    pub m: usize,
    pub pooling: String,
    #[serde(default)]
    pub normalize_before_pool: bool,
    pub fewshot_n: usize,
    #[serde(default)]
    pub fewshot_seed: u64,
    #[serde(default = "default_true")]
    pub per_source: bool,
    pub p_k_list: Vec<usize>,
    pub acc_k_list: Vec<usize>,
    pub top_k: usize,
    #[serde(default)]
    pub rank_dispersion: Option<String>,
}

fn default_true() -> bool {
    true
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            mode: "gear".into(),
            prompt: "bp1".into(),
            m: 5,
            pooling: "mean".into(),
            normalize_before_pool: false,
            fewshot_n: 5,
            fewshot_seed: 0,
            per_source: true,
            p_k_list: vec![1, 3, 5],
            acc_k_list: vec![1, 5, 10, 100, 1000],
            top_k: 10,
            rank_dispersion: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerationSection {
    pub provider: String,
    pub endpoint: String,
    pub model: String,
    pub temperature: f64,
    pub max_retries: u32,
    pub timeout_secs: f64,
    pub concurrency: usize,
    /// Definition-to-terms table for the mock provider.
    pub mock_table: Option<String>,
    #[serde(default)]
    pub mock_seed: u64,
}

impl Default for GenerationSection {
    fn default() -> Self {
        Self {
            provider: "mock".into(),
            endpoint: "https://api.openai.com/v1".into(),
            model: "gpt-4o-mini".into(),
            temperature: 0.0,
            max_retries: 2,
            timeout_secs: 60.0,
            concurrency: 8,
            mock_table: None,
            mock_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbeddingSection {
    pub provider: String,
    pub endpoint: String,
    pub model: String,
    pub dimension: usize,
    pub instruction: String,
    pub batch_size: usize,
    #[serde(default)]
    pub mock_seed: u64,
}

impl Default for EmbeddingSection {
    fn default() -> Self {
        Self {
            provider: "mock".into(),
            endpoint: "https://api.openai.com/v1".into(),
            model: "mock-embed".into(),
            dimension: 384,
            instruction: "none".into(),
            batch_size: 64,
            mock_seed: 0,
        }
    }
}

/// A parsed config plus the provenance text echoed into reports.
pub struct LoadedConfig {
    pub config: RunConfig,
    pub base_dir: PathBuf,
    /// Raw config text plus applied result-affecting overrides, sorted.
    pub provenance_text: String,
}

pub fn load_config(path: &Path, overrides: &BTreeMap<String, String>) -> anyhow::Result<LoadedConfig> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let mut config: RunConfig = toml::from_str(&text).context("parsing config")?;
    for (key, value) in overrides {
        apply_override(&mut config, key, value)?;
    }
    let mut provenance_text = text;
    if !overrides.is_empty() {
        provenance_text.push_str("\n# overrides\n");
        for (key, value) in overrides {
            provenance_text.push_str(&format!("# {key} = {value}\n"));
        }
    }
    Ok(LoadedConfig {
        config,
        base_dir: path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf(),
        provenance_text,
    })
}

fn apply_override(config: &mut RunConfig, key: &str, value: &str) -> anyhow::Result<()> {
    match key {
        "mode" => config.run.mode = value.to_string(),
        "prompt" => config.run.prompt = value.to_string(),
        "pooling" => config.run.pooling = value.to_string(),
        "m" => config.run.m = value.parse().context("override m")?,
        "seed" => config.split.seed = value.parse().context("override seed")?,
        "top_k" => config.run.top_k = value.parse().context("override top_k")?,
        "instruction" => config.embedding.instruction = value.to_string(),
        other => bail!("unknown override {other:?}"),
    }
    Ok(())
}

impl LoadedConfig {
    fn resolve(&self, p: &str) -> PathBuf {
        let path = Path::new(p);
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }

    pub fn load_corpus(&self) -> anyhow::Result<Corpus> {
        let section = &self.config.corpus;
        let mut corpus = if let Some(manifest) = &section.manifest {
            load_manifest(&self.resolve(manifest))?
        } else if let Some(path) = &section.path {
            let path = self.resolve(path);
            let format: CorpusFormat = match &section.format {
                Some(f) => f.parse()?,
                None => match path.extension().and_then(|e| e.to_str()) {
                    Some("csv") => CorpusFormat::Csv,
                    Some("tsv") => CorpusFormat::Tsv,
                    _ => CorpusFormat::Jsonl,
                },
            };
            load_corpus(&path, format)?
        } else {
            bail!("config needs corpus.manifest or corpus.path");
        };
        if let Some(name) = &section.name {
            corpus.name = name.clone();
        }
        if let Some(description) = &section.description {
            corpus.description = description.clone();
        }
        if corpus.description.is_empty() {
            corpus.description = format!("the {} dictionary", corpus.name);
        }
        Ok(corpus)
    }

    pub fn eval_options(&self) -> anyhow::Result<EvalOptions> {
        let run = &self.config.run;
        let mode: EvalMode = run.mode.parse()?;
        let prompt_variant: Option<PromptVariant> = if mode == EvalMode::EmbeddingOnly {
            None
        } else {
            Some(run.prompt.parse()?)
        };
        let pooling: Pooling = run.pooling.parse()?;
        let dispersion = match run.rank_dispersion.as_deref() {
            None | Some("std") | Some("std_dev") => RankDispersion::StdDev,
            Some("variance") => RankDispersion::Variance,
            Some(other) => bail!("unknown rank_dispersion {other:?}"),
        };
        Ok(EvalOptions {
            mode,
            prompt_variant,
            m: run.m,
            use_m: None,
            pooling,
            normalize_before_pool: run.normalize_before_pool,
            p_k_list: run.p_k_list.clone(),
            acc_k_list: run.acc_k_list.clone(),
            top_k: run.top_k,
            fewshot_n: run.fewshot_n,
            fewshot_seed: run.fewshot_seed,
            dispersion,
            per_source: run.per_source,
        })
    }

    pub fn build_chat_provider(&self) -> anyhow::Result<Arc<dyn ChatProvider>> {
        let g = &self.config.generation;
        match g.provider.as_str() {
            "mock" => {
                let table_path = g
                    .mock_table
                    .as_ref()
                    .ok_or_else(|| anyhow::anyhow!("mock generation needs generation.mock_table"))?;
                let text = std::fs::read_to_string(self.resolve(table_path))
                    .with_context(|| format!("reading mock table {table_path}"))?;
                let table: BTreeMap<String, Vec<String>> =
                    serde_json::from_str(&text).context("parsing mock table")?;
                Ok(Arc::new(MockChatProvider::new(table, g.mock_seed)))
            }
            "http" => Ok(Arc::new(HttpChatProvider::new(&self.generation_config())?)),
            other => bail!("unknown generation provider {other:?}"),
        }
    }

    pub fn generation_config(&self) -> GenerationConfig {
        let g = &self.config.generation;
        GenerationConfig {
            endpoint: g.endpoint.clone(),
            model_id: g.model.clone(),
            temperature: g.temperature,
            max_retries: g.max_retries,
            timeout: Duration::from_secs_f64(g.timeout_secs),
            concurrency_limit: g.concurrency,
            backoff_base: Duration::from_secs(1),
        }
    }

    pub fn build_generator(&self, cache_dir: Option<&Path>) -> anyhow::Result<Generator> {
        let provider = self.build_chat_provider()?;
        let mut generator = Generator::new(provider, self.generation_config());
        if let Some(dir) = cache_dir {
            let model_dir = sanitize(&self.config.generation.model);
            generator = generator.with_cache_dir(dir.join("llm").join(model_dir))?;
        }
        Ok(generator)
    }

    pub fn build_embedding_provider(&self) -> anyhow::Result<Arc<dyn EmbeddingProvider>> {
        let e = &self.config.embedding;
        match e.provider.as_str() {
            "mock" => Ok(Arc::new(MockEmbedder::new(e.mock_seed, e.dimension))),
            "http" => Ok(Arc::new(HttpEmbedder::new(
                &e.endpoint,
                &e.model,
                e.dimension,
                Duration::from_secs_f64(self.config.generation.timeout_secs),
            )?)),
            other => bail!("unknown embedding provider {other:?}"),
        }
    }

    pub fn instruction(&self) -> anyhow::Result<InstructionConfig> {
        let variant: InstructionVariant = self.config.embedding.instruction.parse()?;
        Ok(InstructionConfig::for_variant(variant))
    }

    /// Embedding cache directory for this model and instruction variant.
    pub fn embed_cache_dir(&self, cache_dir: &Path) -> PathBuf {
        cache_dir.join("embed").join(format!(
            "{}-{}",
            sanitize(&self.config.embedding.model),
            self.config.embedding.instruction
        ))
    }

    pub fn build_embedder(&self, cache_dir: Option<&Path>) -> anyhow::Result<Embedder> {
        let provider = self.build_embedding_provider()?;
        let instruction = self.instruction()?;
        let embedder = match cache_dir {
            Some(dir) => {
                let cache_path = self.embed_cache_dir(dir);
                if cache_path.join("manifest.json").exists() {
                    let cache = EmbeddingCache::load(&cache_path)?;
                    Embedder::with_cache(provider, instruction, cache)?
                } else {
                    Embedder::new(provider, instruction)
                }
            }
            None => Embedder::new(provider, instruction),
        };
        Ok(embedder.batch_size(self.config.embedding.batch_size))
    }
}

fn sanitize(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' })
        .collect()
}
