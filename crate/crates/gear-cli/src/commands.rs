//! Subcommand implementations.

use std::collections::HashMap;
use std::path::Path;
use std::time::Instant;

use anyhow::Context;

use gear_core::corpus::{
    load_corpus, random_split, save_corpus, source_split, vocabulary, Corpus, CorpusFormat,
    CorpusSplit,
};
use gear_core::embed::{Embedder, InstructionVariant, TextRole};
use gear_core::eval::{evaluate, EvalComponents, EvalMode, EvalOptions};
use gear_core::index::{
    build_index, knn, knn_batch_parallel, knn_sequential, pool, PooledQuery, Pooling, VectorIndex,
};
use gear_core::llmgen::Generator;
use gear_core::matrix::Matrix;
use gear_core::prompt::{sample_fewshot_from, PromptSpec};
use gear_core::report::{render_table, report_from_jsonl, report_to_jsonl, trace_to_jsonl};
use gear_core::Vocabulary;

use crate::config::{load_config, LoadedConfig};
use crate::{PipelineArgs, UsageError};

const TRACE_QUERY_LIMIT: usize = 10_000;

pub fn ingest(input: &Path, format: CorpusFormat, out: &Path) -> anyhow::Result<()> {
    let corpus = load_corpus(input, format)?;
    if let Some(parent) = out.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut buf = Vec::new();
    save_corpus(&corpus, &mut buf)?;
    std::fs::write(out, &buf)?;
    println!(
        "ingested {} -> {} ({} entries)",
        input.display(),
        out.display(),
        corpus.len()
    );
    Ok(())
}

pub fn split(
    config_path: &Path,
    out: &Path,
    seed: Option<u64>,
    kind: Option<String>,
) -> anyhow::Result<()> {
    let loaded = load_config(config_path, &Default::default())?;
    let corpus = loaded.load_corpus()?;
    let section = &loaded.config.split;
    let seed = seed.unwrap_or(section.seed);
    let ratios = (section.ratios[0], section.ratios[1], section.ratios[2]);
    let kind = kind.unwrap_or_else(|| section.kind.clone());
    if let Some(parent) = out.parent() {
        std::fs::create_dir_all(parent)?;
    }
    match kind.as_str() {
        "random" => {
            let split = random_split(&corpus, seed, ratios)?;
            std::fs::write(out, serde_json::to_string_pretty(&split)?)?;
            println!(
                "random split seed={} -> train={} valid={} test={}",
                seed,
                split.train.len(),
                split.valid.len(),
                split.test.len()
            );
        }
        "source" => {
            let splits = source_split(&corpus, seed, ratios)?;
            std::fs::write(out, serde_json::to_string_pretty(&splits)?)?;
            for (source, split) in &splits {
                println!(
                    "{source}: train={} valid={} test={}",
                    split.train.len(),
                    split.valid.len(),
                    split.test.len()
                );
            }
        }
        other => return Err(UsageError(format!("unknown split kind {other:?}")).into()),
    }
    Ok(())
}

fn with_thread_pool<T>(
    threads: Option<usize>,
    f: impl FnOnce() -> anyhow::Result<T> + Send,
) -> anyhow::Result<T>
where
    T: Send,
{
    match threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .context("building thread pool")?
            .install(f),
        None => f(),
    }
}

fn build_or_load_index(
    loaded: &LoadedConfig,
    args: &PipelineArgs,
    vocab: &Vocabulary,
    embedder: &Embedder,
) -> anyhow::Result<VectorIndex> {
    if let Some(dir) = &args.index_dir {
        let index = VectorIndex::load(dir).with_context(|| {
            format!(
                "loading index from {} (build one with `gear build-index`)",
                dir.display()
            )
        })?;
        if index.model_id != embedder.model_id() {
            return Err(UsageError(format!(
                "index was built with model {:?} but config names {:?}",
                index.model_id,
                embedder.model_id()
            ))
            .into());
        }
        let _ = loaded;
        Ok(index)
    } else {
        Ok(build_index(vocab, embedder)?)
    }
}

pub fn build_index_cmd(args: &PipelineArgs) -> anyhow::Result<()> {
    let loaded = load_config(&args.config, &args.overrides())?;
    let corpus = loaded.load_corpus()?;
    let vocab = vocabulary(&corpus)?;
    let cache_dir = args.cache_dir();
    let embedder = loaded.build_embedder(Some(&cache_dir))?;
    let index = build_index(&vocab, &embedder)?;
    let out = args.out_dir.join("index");
    index.save(&out)?;
    embedder.save_cache(&loaded.embed_cache_dir(&cache_dir))?;
    println!(
        "index: {} terms, dim={}, saved to {}",
        index.len(),
        index.dim(),
        out.display()
    );
    Ok(())
}

pub fn generate(args: &PipelineArgs) -> anyhow::Result<()> {
    let loaded = load_config(&args.config, &args.overrides())?;
    let corpus = loaded.load_corpus()?;
    let opts = loaded.eval_options()?;
    let variant = opts
        .prompt_variant
        .ok_or_else(|| UsageError("generate needs a prompt variant".into()))?;
    let section = &loaded.config.split;
    let split = random_split(
        &corpus,
        section.seed,
        (section.ratios[0], section.ratios[1], section.ratios[2]),
    )?;
    let cache_dir = args.cache_dir();
    let generator = loaded.build_generator(Some(&cache_dir))?;

    let mut degraded = 0usize;
    let mut failed = 0usize;
    for &id in &split.test {
        let entry = &corpus.entries[id];
        let fewshot = if variant.wants_examples() {
            sample_fewshot_from(
                &corpus,
                Some(&split.train),
                opts.fewshot_n,
                opts.fewshot_seed,
                &entry.definition,
            )?
        } else {
            Vec::new()
        };
        let spec = PromptSpec {
            variant,
            k: opts.m,
            dictionary_name: corpus.name.clone(),
            dictionary_description: corpus.description.clone(),
            fewshot,
        };
        match generator.generate(&spec, &entry.definition) {
            Ok(cs) if cs.degraded => degraded += 1,
            Ok(_) => {}
            Err(e) => {
                log::warn!("generation failed: {e}");
                failed += 1;
            }
        }
    }
    println!(
        "generated {} definitions ({} degraded, {} failed); provider calls: {}, cache hits: {}",
        split.test.len(),
        degraded,
        failed,
        generator.provider_calls(),
        generator.cache_hits()
    );
    Ok(())
}

/// Extract a source-restricted corpus and remap split ids into it.
fn sub_corpus(corpus: &Corpus, name: &str, split: &CorpusSplit) -> (Corpus, CorpusSplit) {
    let mut ids: Vec<usize> = split
        .train
        .iter()
        .chain(&split.valid)
        .chain(&split.test)
        .copied()
        .collect();
    ids.sort_unstable();
    let remap: HashMap<usize, usize> = ids.iter().enumerate().map(|(n, &o)| (o, n)).collect();
    let sub = Corpus {
        name: name.to_string(),
        description: corpus.description.clone(),
        entries: ids.iter().map(|&i| corpus.entries[i].clone()).collect(),
    };
    let map = |v: &[usize]| v.iter().map(|i| remap[i]).collect();
    (
        sub,
        CorpusSplit {
            train: map(&split.train),
            valid: map(&split.valid),
            test: map(&split.test),
            seed: split.seed,
        },
    )
}

fn parse_sweep(s: &str) -> anyhow::Result<std::ops::RangeInclusive<usize>> {
    let (a, b) = s
        .split_once("..")
        .ok_or_else(|| UsageError(format!("sweep must look like `1..5`, got {s:?}")))?;
    let a: usize = a.parse().map_err(|_| UsageError(format!("bad sweep start {a:?}")))?;
    let b: usize = b.parse().map_err(|_| UsageError(format!("bad sweep end {b:?}")))?;
    if a == 0 || b < a {
        return Err(UsageError(format!("bad sweep range {s:?}")).into());
    }
    Ok(a..=b)
}

pub fn run(args: &PipelineArgs) -> anyhow::Result<()> {
    with_thread_pool(args.threads, || run_inner(args))
}

fn run_inner(args: &PipelineArgs) -> anyhow::Result<()> {
    let loaded = load_config(&args.config, &args.overrides())?;
    let corpus = loaded.load_corpus()?;
    let opts = loaded.eval_options()?;
    let section = &loaded.config.split;
    let ratios = (section.ratios[0], section.ratios[1], section.ratios[2]);
    std::fs::create_dir_all(&args.out_dir)?;

    match section.kind.as_str() {
        "random" => {
            let split = random_split(&corpus, section.seed, ratios)?;
            run_split(args, &loaded, &corpus, &split, &opts, &args.out_dir)?;
        }
        "source" => {
            for (source, split) in source_split(&corpus, section.seed, ratios)? {
                let (sub, sub_split) = sub_corpus(&corpus, &source, &split);
                let out = args.out_dir.join(sanitize_path(&source));
                std::fs::create_dir_all(&out)?;
                println!("== source {source} ==");
                run_split(args, &loaded, &sub, &sub_split, &opts, &out)?;
            }
        }
        other => return Err(UsageError(format!("unknown split kind {other:?}")).into()),
    }
    Ok(())
}

fn sanitize_path(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
        .collect()
}

fn run_split(
    args: &PipelineArgs,
    loaded: &LoadedConfig,
    corpus: &Corpus,
    split: &CorpusSplit,
    opts: &EvalOptions,
    out_dir: &Path,
) -> anyhow::Result<()> {
    let cache_dir = args.cache_dir();
    let needs_generation = opts.mode != EvalMode::EmbeddingOnly;
    let needs_index = opts.mode != EvalMode::LlmOnly;

    let generator: Option<Generator> = if needs_generation {
        Some(loaded.build_generator(Some(&cache_dir))?)
    } else {
        None
    };
    let embedder: Option<Embedder> = if needs_index {
        Some(loaded.build_embedder(Some(&cache_dir))?)
    } else {
        None
    };
    let index: Option<VectorIndex> = match &embedder {
        Some(embedder) => {
            let vocab = vocabulary(corpus)?;
            Some(build_or_load_index(loaded, args, &vocab, embedder)?)
        }
        None => None,
    };

    let comps = EvalComponents {
        generator: generator.as_ref(),
        embedder: embedder.as_ref(),
        index: index.as_ref(),
        fewshot_pool: Some(&split.train),
    };

    let sweep: Vec<Option<usize>> = match &args.sweep_m {
        Some(s) => parse_sweep(s)?.map(Some).collect(),
        None => vec![None],
    };
    for use_m in sweep {
        let mut opts = opts.clone();
        opts.use_m = use_m;
        let (mut report, results) = evaluate(corpus, &split.test, &opts, &comps)?;
        report.provenance.run_config = loaded.provenance_text.clone();

        let suffix = use_m.map(|m| format!("_m{m}")).unwrap_or_default();
        let jsonl = report_to_jsonl(&report)?;
        std::fs::write(out_dir.join(format!("report{suffix}.jsonl")), &jsonl)?;
        let table = render_table(&report);
        std::fs::write(out_dir.join(format!("report{suffix}.txt")), &table)?;
        if !args.no_trace && results.len() <= TRACE_QUERY_LIMIT {
            std::fs::write(
                out_dir.join(format!("trace{suffix}.jsonl")),
                trace_to_jsonl(&results)?,
            )?;
        }
        print!("{table}");
    }

    if let Some(embedder) = &embedder {
        embedder.save_cache(&loaded.embed_cache_dir(&cache_dir))?;
        println!("embedding provider calls: {}", embedder.provider_calls());
    }
    if let Some(generator) = &generator {
        println!(
            "generation provider calls: {}, cache hits: {}",
            generator.provider_calls(),
            generator.cache_hits()
        );
    }
    println!("reports written to {}", out_dir.display());
    Ok(())
}

pub fn query(args: &PipelineArgs, definition: &str) -> anyhow::Result<()> {
    let k = args.topk.unwrap_or(10);
    if k == 0 {
        return Err(UsageError("--topk must be at least 1".into()).into());
    }
    let loaded = load_config(&args.config, &args.overrides())?;
    let corpus = loaded.load_corpus()?;
    let opts = loaded.eval_options()?;
    let cache_dir = args.cache_dir();
    let embedder = loaded.build_embedder(Some(&cache_dir))?;
    let vocab = vocabulary(&corpus)?;
    let index = build_or_load_index(&loaded, args, &vocab, &embedder)?;

    let pooled = match opts.mode {
        EvalMode::EmbeddingOnly => {
            let rows = embedder.embed_texts(&[definition.to_string()], TextRole::Query)?;
            PooledQuery {
                vector: rows.row(0).to_vec(),
                pooling: Pooling::First,
                m: 1,
            }
        }
        _ => {
            let variant = opts
                .prompt_variant
                .ok_or_else(|| UsageError("query needs a prompt variant".into()))?;
            let generator = loaded.build_generator(Some(&cache_dir))?;
            let fewshot = if variant.wants_examples() {
                sample_fewshot_from(&corpus, None, opts.fewshot_n, opts.fewshot_seed, definition)?
            } else {
                Vec::new()
            };
            let spec = PromptSpec {
                variant,
                k: opts.m,
                dictionary_name: corpus.name.clone(),
                dictionary_description: corpus.description.clone(),
                fewshot,
            };
            let cs = generator.generate(&spec, definition)?;
            println!("candidates: {}", cs.candidates.join(", "));
            let rows = embedder.embed_texts(&cs.candidates, TextRole::Document)?;
            pool(&rows, opts.pooling, opts.normalize_before_pool)?
        }
    };
    let result = knn(&index, &pooled, k)?;
    for (rank, (&id, &score)) in result.term_ids.iter().zip(&result.scores).enumerate() {
        println!("{:>3}  {score:+.4}  {}", rank + 1, index.vocabulary().term(id));
    }
    embedder.save_cache(&loaded.embed_cache_dir(&cache_dir))?;
    Ok(())
}

pub fn report(path: &Path) -> anyhow::Result<()> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading report {}", path.display()))?;
    let report = report_from_jsonl(&text)?;
    print!("{}", render_table(&report));
    Ok(())
}

fn synthetic_index(terms: usize, dim: usize, seed: u64) -> VectorIndex {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = (0..terms).map(|i| format!("term{i:06}")).collect();
    let mut matrix = Matrix::with_capacity(dim, terms);
    let mut row = vec![0.0f32; dim];
    for _ in 0..terms {
        for v in &mut row {
            *v = rng.gen_range(-1.0f32..1.0);
        }
        matrix.push_row(&row).expect("fixed dim");
    }
    VectorIndex::from_parts(
        Vocabulary::from_terms(names),
        matrix,
        "bench",
        InstructionVariant::None,
    )
    .expect("nonzero rows")
}

fn median_ms(mut samples: Vec<f64>) -> f64 {
    samples.sort_by(f64::total_cmp);
    samples[samples.len() / 2]
}

pub fn bench(
    terms: usize,
    dim: usize,
    queries: usize,
    threads: usize,
    json: bool,
) -> anyhow::Result<()> {
    use rand::{Rng, SeedableRng};
    if terms == 0 || dim == 0 || queries == 0 || threads == 0 {
        return Err(UsageError("bench sizes must be positive".into()).into());
    }
    let index = synthetic_index(terms, dim, 42);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(43);
    let qs: Vec<PooledQuery> = (0..queries)
        .map(|_| PooledQuery {
            vector: (0..dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
            pooling: Pooling::Mean,
            m: 5,
        })
        .collect();

    // Single-query latency, strictly single-threaded.
    knn_sequential(&index, &qs[0], 10)?;
    let single_query_ms = median_ms(
        (0..5)
            .map(|i| {
                let start = Instant::now();
                knn_sequential(&index, &qs[i % qs.len()], 10).expect("bench query");
                start.elapsed().as_secs_f64() * 1e3
            })
            .collect(),
    );

    // Batch evaluation under 1 thread and under `threads` threads.
    let time_with = |n: usize| -> anyhow::Result<f64> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .context("building bench pool")?;
        let start = Instant::now();
        pool.install(|| knn_batch_parallel(&index, &qs, 10))?;
        Ok(start.elapsed().as_secs_f64() * 1e3)
    };
    // Warm the page cache before timing either configuration.
    knn_batch_parallel(&index, &qs[..queries.min(4)], 10)?;
    let batch_single_thread_ms = time_with(1)?;
    let batch_multi_thread_ms = time_with(threads)?;
    let speedup = batch_single_thread_ms / batch_multi_thread_ms;
    let available_cores = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1);

    if json {
        println!(
            "{}",
            serde_json::json!({
                "terms": terms,
                "dim": dim,
                "queries": queries,
                "threads": threads,
                "available_cores": available_cores,
                "single_query_ms": single_query_ms,
                "batch_single_thread_ms": batch_single_thread_ms,
                "batch_multi_thread_ms": batch_multi_thread_ms,
                "speedup": speedup,
            })
        );
    } else {
        println!("index: {terms} terms, dim={dim}");
        println!("single query (sequential, median of 5): {single_query_ms:.1} ms");
        println!(
            "batch of {queries}: 1 thread {batch_single_thread_ms:.0} ms, {threads} threads {batch_multi_thread_ms:.0} ms (speedup {speedup:.2}x, {available_cores} cores available)"
        );
    }
    Ok(())
}
