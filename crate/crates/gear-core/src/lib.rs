//! Reverse-dictionary retrieval: generate candidate terms with a language
//! model, embed them, pool the embeddings into one query vector, and rank
//! the dictionary vocabulary by exact cosine similarity. A benchmark
//! harness evaluates the pipeline (and its embedding-only and LLM-only
//! ablations) with standard IR metrics.
//!
//! Built with rayon data-parallel scans by default; disable the `parallel`
//! feature for a dependency-free sequential fallback with identical output.

pub mod corpus;
pub mod embed;
pub mod error;
pub mod eval;
pub mod index;
pub mod llmgen;
pub mod matrix;
pub mod prompt;
pub mod report;

pub use corpus::{
    aggregate_rd, load_corpus, load_manifest, random_split, save_corpus, source_split,
    vocabulary, Corpus, CorpusFormat, CorpusManifest, CorpusSplit, DictionaryEntry, Vocabulary,
};
pub use embed::{
    Embedder, EmbeddingCache, EmbeddingProvider, HttpEmbedder, InstructionConfig,
    InstructionVariant, MockEmbedder, TextRole,
};
pub use error::{Error, Result};
pub use eval::{
    accuracy_at_k, compute_block, evaluate, median_rank, mrr, precision_at_k, rank_std,
    ConfigDescriptor, EvalComponents, EvalCounts, EvalMode, EvalOptions, EvalReport, MetricBlock,
    Provenance, QueryResult, RankDispersion,
};
pub use index::{
    build_index, cosine, knn, knn_sequential, max_pool, mean_pool, pool, positions_of, rank_of,
    PooledQuery, Pooling, RankedResult, VectorIndex,
};
#[cfg(feature = "parallel")]
pub use index::{knn_batch_parallel, knn_parallel};
pub use index::knn_batch_sequential;
pub use llmgen::{
    cache_key, mock_response, ChatProvider, GenerationConfig, GenerationRecord, Generator,
    HttpChatProvider, MockChatProvider,
};
pub use matrix::Matrix;
pub use prompt::{
    fallback_candidates, parse_candidates, render_prompt, sample_fewshot, sample_fewshot_from,
    CandidateSet, PromptSpec, PromptVariant,
};
pub use report::{render_table, report_from_jsonl, report_to_jsonl, trace_to_jsonl};
