//! End-to-end evaluation through the library with mock providers: planted
//! optima, cache transparency, and the three mode contracts.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use gear_core::corpus::{aggregate_rd, vocabulary, Corpus};
use gear_core::embed::{
    Embedder, EmbeddingProvider, InstructionConfig, InstructionVariant, MockEmbedder,
};
use gear_core::eval::{evaluate, EvalComponents, EvalMode, EvalOptions};
use gear_core::index::build_index;
use gear_core::llmgen::{ChatProvider, GenerationConfig, Generator, MockChatProvider};
use gear_core::prompt::PromptVariant;
use gear_core::report_to_jsonl;
use gear_core::Result;

fn toy_corpus(n: usize) -> Corpus {
    let pairs: Vec<(String, String, String)> = (0..n)
        .map(|i| {
            (
                format!("word{i:03}"),
                format!("meaning number {i} of the toy dictionary"),
                ["WN", "Wik", "Urban"][i % 3].to_string(),
            )
        })
        .collect();
    let mut corpus = aggregate_rd("Toy", &pairs).unwrap();
    corpus.description = "a toy dictionary".into();
    corpus
}

fn gold_first_table(corpus: &Corpus) -> BTreeMap<String, Vec<String>> {
    corpus
        .entries
        .iter()
        .map(|e| (e.definition.clone(), vec![e.terms[0].clone()]))
        .collect()
}

/// Embedder whose aliased texts share one vector: maps each definition to
/// its gold term before hashing.
struct PlantedEmbedder {
    inner: MockEmbedder,
    alias: HashMap<String, String>,
}

impl EmbeddingProvider for PlantedEmbedder {
    fn model_id(&self) -> &str {
        "planted"
    }

    fn dimension(&self) -> usize {
        self.inner.dimension()
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f32>>> {
        Ok(texts
            .iter()
            .map(|t| {
                let canonical = self.alias.get(t).map(|s| s.as_str()).unwrap_or(t.as_str());
                self.inner.embed_one(canonical)
            })
            .collect())
    }

    fn calls(&self) -> usize {
        self.inner.calls()
    }
}

#[test]
fn llm_only_gold_first_gives_perfect_acc1() {
    let corpus = toy_corpus(20);
    let provider = Arc::new(MockChatProvider::new(gold_first_table(&corpus), 5));
    let generator = Generator::new(provider, GenerationConfig::default());
    let opts = EvalOptions {
        mode: EvalMode::LlmOnly,
        prompt_variant: Some(PromptVariant::Bp1),
        ..EvalOptions::default()
    };
    let comps = EvalComponents {
        generator: Some(&generator),
        embedder: None,
        index: None,
        fewshot_pool: None,
    };
    let ids: Vec<usize> = (0..corpus.len()).collect();
    let (report, results) = evaluate(&corpus, &ids, &opts, &comps).unwrap();
    assert_eq!(report.aggregate.acc_at[&1], 1.0);
    assert_eq!(report.aggregate.mrr, None);
    assert_eq!(report.aggregate.median_rank, None);
    assert_eq!(report.counts.queries, 20);
    assert!(results.iter().all(|r| r.best_rank.is_none()));
}

#[test]
fn embedding_only_planted_vectors_are_perfect() {
    let corpus = toy_corpus(25);
    let alias: HashMap<String, String> = corpus
        .entries
        .iter()
        .map(|e| (e.definition.clone(), e.terms[0].clone()))
        .collect();
    let provider = Arc::new(PlantedEmbedder {
        inner: MockEmbedder::new(3, 384),
        alias,
    });
    let embedder = Embedder::new(
        provider,
        InstructionConfig::for_variant(InstructionVariant::None),
    );
    let vocab = vocabulary(&corpus).unwrap();
    let index = build_index(&vocab, &embedder).unwrap();
    let opts = EvalOptions {
        mode: EvalMode::EmbeddingOnly,
        prompt_variant: None,
        ..EvalOptions::default()
    };
    let comps = EvalComponents {
        generator: None,
        embedder: Some(&embedder),
        index: Some(&index),
        fewshot_pool: None,
    };
    let ids: Vec<usize> = (0..corpus.len()).collect();
    let (report, _) = evaluate(&corpus, &ids, &opts, &comps).unwrap();
    assert_eq!(report.aggregate.mrr, Some(1.0));
    assert_eq!(report.aggregate.p_at[&1], 1.0);
    assert_eq!(report.aggregate.acc_at[&1], 1.0);
    assert_eq!(report.aggregate.median_rank, Some(0.0));
    assert_eq!(report.aggregate.rank_std, Some(0.0));
}

#[test]
fn gear_single_planted_candidate_ranks_gold_first() {
    // With m=1 and the mock emitting the gold term first, the pooled query
    // equals the gold row exactly, for mean, max, and first pooling alike.
    let corpus = toy_corpus(15);
    let chat = Arc::new(MockChatProvider::new(gold_first_table(&corpus), 1));
    let generator = Generator::new(chat, GenerationConfig::default());
    let provider = Arc::new(MockEmbedder::new(11, 384));
    let embedder = Embedder::new(
        provider,
        InstructionConfig::for_variant(InstructionVariant::Dictionary),
    );
    let vocab = vocabulary(&corpus).unwrap();
    let index = build_index(&vocab, &embedder).unwrap();
    let ids: Vec<usize> = (0..corpus.len()).collect();
    for pooling in ["mean", "max", "first"] {
        let opts = EvalOptions {
            mode: EvalMode::Gear,
            prompt_variant: Some(PromptVariant::Bp1),
            m: 5,
            use_m: Some(1),
            pooling: pooling.parse().unwrap(),
            ..EvalOptions::default()
        };
        let comps = EvalComponents {
            generator: Some(&generator),
            embedder: Some(&embedder),
            index: Some(&index),
            fewshot_pool: None,
        };
        let (report, _) = evaluate(&corpus, &ids, &opts, &comps).unwrap();
        assert_eq!(report.aggregate.mrr, Some(1.0), "pooling {pooling}");
        assert_eq!(report.aggregate.median_rank, Some(0.0), "pooling {pooling}");
    }
}

#[test]
fn warm_cache_run_is_bit_identical_with_zero_calls() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = toy_corpus(12);
    let table = gold_first_table(&corpus);
    let ids: Vec<usize> = (0..corpus.len()).collect();
    let opts = EvalOptions {
        mode: EvalMode::Gear,
        prompt_variant: Some(PromptVariant::Bp1),
        ..EvalOptions::default()
    };

    let run = |cold: bool| -> (String, usize, usize) {
        let chat = Arc::new(MockChatProvider::new(table.clone(), 9));
        let generator = Generator::new(chat.clone(), GenerationConfig::default())
            .with_cache_dir(dir.path().join("llm"))
            .unwrap();
        let provider = Arc::new(MockEmbedder::new(4, 256));
        let instruction = InstructionConfig::for_variant(InstructionVariant::Generic);
        let cache_path = dir.path().join("embed");
        let embedder = if cache_path.join("manifest.json").exists() {
            Embedder::with_cache(
                provider.clone(),
                instruction,
                gear_core::EmbeddingCache::load(&cache_path).unwrap(),
            )
            .unwrap()
        } else {
            Embedder::new(provider.clone(), instruction)
        };
        let vocab = vocabulary(&corpus).unwrap();
        let index = build_index(&vocab, &embedder).unwrap();
        let comps = EvalComponents {
            generator: Some(&generator),
            embedder: Some(&embedder),
            index: Some(&index),
            fewshot_pool: None,
        };
        let (report, _) = evaluate(&corpus, &ids, &opts, &comps).unwrap();
        embedder.save_cache(&cache_path).unwrap();
        let calls = chat.calls() + provider.calls();
        let _ = cold;
        (report_to_jsonl(&report).unwrap(), chat.calls(), calls - chat.calls())
    };

    let (cold_report, cold_chat_calls, _) = run(true);
    assert_eq!(cold_chat_calls, 12);
    let (warm_report, warm_chat_calls, warm_embed_calls) = run(false);
    assert_eq!(warm_chat_calls, 0);
    assert_eq!(warm_embed_calls, 0);
    assert_eq!(cold_report, warm_report);
}

#[test]
fn missing_gold_is_counted_and_excluded() {
    // Index built from a different corpus: gold terms of the query corpus
    // are absent from the vocabulary.
    let corpus = toy_corpus(10);
    let other = {
        let pairs: Vec<(String, String, String)> = (0..5)
            .map(|i| {
                (
                    format!("elsewhere{i}"),
                    format!("another meaning {i}"),
                    "WN".to_string(),
                )
            })
            .collect();
        aggregate_rd("Other", &pairs).unwrap()
    };
    let provider = Arc::new(MockEmbedder::new(8, 128));
    let embedder = Embedder::new(
        provider,
        InstructionConfig::for_variant(InstructionVariant::None),
    );
    let vocab = vocabulary(&other).unwrap();
    let index = build_index(&vocab, &embedder).unwrap();
    let opts = EvalOptions {
        mode: EvalMode::EmbeddingOnly,
        prompt_variant: None,
        ..EvalOptions::default()
    };
    let comps = EvalComponents {
        generator: None,
        embedder: Some(&embedder),
        index: Some(&index),
        fewshot_pool: None,
    };
    let ids: Vec<usize> = (0..corpus.len()).collect();
    let err = evaluate(&corpus, &ids, &opts, &comps).unwrap_err();
    // Every query misses: the metrics are undefined.
    assert!(err.to_string().contains("no scorable"), "{err}");

    // A mixed corpus keeps the scorable part and counts the misses.
    let mut mixed = corpus.clone();
    mixed.entries[0].terms = vec!["elsewhere0".to_string()];
    let (report, results) = evaluate(&mixed, &ids, &opts, &comps).unwrap();
    assert_eq!(report.counts.missing_gold, 9);
    assert_eq!(report.aggregate.queries, 1);
    assert!(results[1].missing_gold);
}

#[test]
fn mode_config_mismatch_fails_before_any_call() {
    let corpus = toy_corpus(5);
    let chat = Arc::new(MockChatProvider::new(BTreeMap::new(), 1));
    let generator = Generator::new(chat.clone(), GenerationConfig::default());
    let opts = EvalOptions {
        mode: EvalMode::Gear,
        prompt_variant: Some(PromptVariant::Bp1),
        ..EvalOptions::default()
    };
    // Gear without an embedder or index must fail fast.
    let comps = EvalComponents {
        generator: Some(&generator),
        embedder: None,
        index: None,
        fewshot_pool: None,
    };
    let ids: Vec<usize> = (0..corpus.len()).collect();
    assert!(evaluate(&corpus, &ids, &opts, &comps).is_err());
    assert_eq!(chat.calls(), 0);
}

#[test]
fn per_source_blocks_cover_entry_sources() {
    let corpus = toy_corpus(30);
    let provider = Arc::new(MockEmbedder::new(2, 128));
    let embedder = Embedder::new(
        provider,
        InstructionConfig::for_variant(InstructionVariant::None),
    );
    let vocab = vocabulary(&corpus).unwrap();
    let index = build_index(&vocab, &embedder).unwrap();
    let opts = EvalOptions {
        mode: EvalMode::EmbeddingOnly,
        prompt_variant: None,
        ..EvalOptions::default()
    };
    let comps = EvalComponents {
        generator: None,
        embedder: Some(&embedder),
        index: Some(&index),
        fewshot_pool: None,
    };
    let ids: Vec<usize> = (0..corpus.len()).collect();
    let (report, _) = evaluate(&corpus, &ids, &opts, &comps).unwrap();
    let keys: Vec<&String> = report.per_source.keys().collect();
    assert_eq!(keys, vec!["Urban", "WN", "Wik"]);
    let total: usize = report.per_source.values().map(|b| b.queries).sum();
    assert_eq!(total, 30);
}
