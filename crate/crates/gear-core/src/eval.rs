//! Evaluation: run a test split through one of the three configurations
//! (embedding-only, LLM-only, full pipeline) and aggregate MRR, P@k, acc@k,
//! median rank and rank deviation, overall and per source.
//!
//! Ranks are 0-indexed for median-rank and acc@k reporting; MRR uses
//! 1-indexed ranks as the reciprocal-rank formula requires. Queries whose
//! gold terms are absent from the vocabulary are counted and excluded from
//! every metric. LLM-only mode has no vocabulary ranking, so its rank
//! metrics are reported as inapplicable rather than fabricated.

use std::collections::{BTreeMap, HashSet};

#[cfg(feature = "parallel")]
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::embed::{Embedder, TextRole};
use crate::error::{Error, Result};
use crate::index::{knn, pool, positions_of, PooledQuery, Pooling, VectorIndex};
use crate::llmgen::Generator;
use crate::prompt::{sample_fewshot_from, PromptSpec, PromptVariant};

/// Which pipeline configuration to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    EmbeddingOnly,
    LlmOnly,
    Gear,
}

impl std::fmt::Display for EvalMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::EmbeddingOnly => write!(f, "embedding_only"),
            Self::LlmOnly => write!(f, "llm_only"),
            Self::Gear => write!(f, "gear"),
        }
    }
}

impl std::str::FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "embedding_only" | "embedding-only" => Ok(Self::EmbeddingOnly),
            "llm_only" | "llm-only" => Ok(Self::LlmOnly),
            "gear" => Ok(Self::Gear),
            other => Err(Error::InvalidConfig(format!("unknown mode {other:?}"))),
        }
    }
}

/// Spread statistic for the rank distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RankDispersion {
    /// Population standard deviation of best ranks.
    #[default]
    StdDev,
    /// Population variance.
    Variance,
}

/// Outcome of one evaluated definition.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QueryResult {
    pub definition: String,
    pub gold_terms: Vec<String>,
    /// Source labels of the entry, for per-source aggregation.
    pub sources: Vec<String>,
    /// Minimum 0-indexed full-ranking position over gold terms. None in
    /// LLM-only mode (no full ranking) and for missing-gold queries.
    pub best_rank: Option<usize>,
    /// Full-ranking positions of every gold term found in the vocabulary.
    pub gold_positions: Vec<usize>,
    /// No gold term exists in the vocabulary; excluded from metrics.
    pub missing_gold: bool,
    pub top_k_terms: Vec<String>,
    pub top_k_scores: Vec<f32>,
    /// relevance_flags[i] is true iff top_k_terms[i] case-folds to a gold term.
    pub relevance_flags: Vec<bool>,
    /// Candidates came from the fallback parser.
    pub degraded: bool,
    /// Generation failed outright; excluded from metrics.
    pub failed: bool,
    /// Generated candidates (gear and llm_only modes).
    pub candidates: Option<Vec<String>>,
}

impl QueryResult {
    fn scored(&self) -> bool {
        !self.missing_gold && !self.failed
    }
}

/// One metric row, as reported overall and per source.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricBlock {
    pub queries: usize,
    pub mrr: Option<f64>,
    pub p_at: BTreeMap<usize, f64>,
    pub acc_at: BTreeMap<usize, f64>,
    pub median_rank: Option<f64>,
    pub rank_std: Option<f64>,
}

/// Query totals alongside the exclusions applied to the metrics.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalCounts {
    pub queries: usize,
    pub missing_gold: usize,
    pub degraded: usize,
    pub failed: usize,
}

/// Resolved configuration echoed into the report.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ConfigDescriptor {
    pub mode: EvalMode,
    pub prompt_variant: Option<PromptVariant>,
    pub pooling: Pooling,
    pub candidates_m: usize,
    pub generation_model: Option<String>,
    pub embedding_model: Option<String>,
    pub instruction_variant: Option<String>,
    pub p_k_list: Vec<usize>,
    pub acc_k_list: Vec<usize>,
    pub top_k: usize,
}

/// Cache identity recorded for reproducibility.
#[derive(Debug, Clone, Serialize, Deserialize, Default, PartialEq)]
pub struct Provenance {
    /// The resolved run configuration, serialized verbatim by the caller.
    pub run_config: String,
    pub llm_cache_fingerprint: Option<String>,
    pub embed_cache_fingerprint: Option<String>,
}

/// Aggregated evaluation output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: ConfigDescriptor,
    pub counts: EvalCounts,
    pub aggregate: MetricBlock,
    pub per_source: BTreeMap<String, MetricBlock>,
    pub provenance: Provenance,
}

/// Mean reciprocal rank over scored results: (1/|Q|) sum of 1/(rank+1).
pub fn mrr(results: &[QueryResult]) -> Result<f64> {
    let ranks = scored_ranks(results)?;
    Ok(ranks.iter().map(|&r| 1.0 / (r as f64 + 1.0)).sum::<f64>() / ranks.len() as f64)
}

fn scored_ranks(results: &[QueryResult]) -> Result<Vec<usize>> {
    let scored: Vec<&QueryResult> = results.iter().filter(|r| r.scored()).collect();
    if scored.is_empty() {
        return Err(Error::UndefinedMetric(
            "no scorable queries after exclusions".into(),
        ));
    }
    scored
        .iter()
        .map(|r| {
            r.best_rank.ok_or_else(|| {
                Error::UndefinedMetric("rank metrics need a full ranking".into())
            })
        })
        .collect()
}

/// Mean over queries of the fraction of relevant items in the top k.
/// Results with fewer than k ranked items are padded with non-relevant.
pub fn precision_at_k(results: &[QueryResult], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::UndefinedMetric("precision@0".into()));
    }
    let scored: Vec<&QueryResult> = results.iter().filter(|r| r.scored()).collect();
    if scored.is_empty() {
        return Err(Error::UndefinedMetric(
            "no scorable queries after exclusions".into(),
        ));
    }
    let total: f64 = scored
        .iter()
        .map(|r| {
            let hits = r.relevance_flags.iter().take(k).filter(|&&f| f).count();
            hits as f64 / k as f64
        })
        .sum();
    Ok(total / scored.len() as f64)
}

/// Fraction of queries with any gold term in the top k.
pub fn accuracy_at_k(results: &[QueryResult], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::UndefinedMetric("accuracy@0".into()));
    }
    let scored: Vec<&QueryResult> = results.iter().filter(|r| r.scored()).collect();
    if scored.is_empty() {
        return Err(Error::UndefinedMetric(
            "no scorable queries after exclusions".into(),
        ));
    }
    let hits = scored
        .iter()
        .filter(|r| match r.best_rank {
            Some(rank) => rank < k,
            None => r.relevance_flags.iter().take(k).any(|&f| f),
        })
        .count();
    Ok(hits as f64 / scored.len() as f64)
}

/// Median of 0-indexed best ranks; even counts average the middle two.
pub fn median_rank(results: &[QueryResult]) -> Result<f64> {
    let mut ranks = scored_ranks(results)?;
    ranks.sort_unstable();
    let n = ranks.len();
    Ok(if n % 2 == 1 {
        ranks[n / 2] as f64
    } else {
        (ranks[n / 2 - 1] as f64 + ranks[n / 2] as f64) / 2.0
    })
}

/// Population dispersion of 0-indexed best ranks.
pub fn rank_std(results: &[QueryResult], dispersion: RankDispersion) -> Result<f64> {
    let ranks = scored_ranks(results)?;
    let n = ranks.len() as f64;
    let mean = ranks.iter().map(|&r| r as f64).sum::<f64>() / n;
    let variance = ranks
        .iter()
        .map(|&r| (r as f64 - mean).powi(2))
        .sum::<f64>()
        / n;
    Ok(match dispersion {
        RankDispersion::Variance => variance,
        RankDispersion::StdDev => variance.sqrt(),
    })
}

/// Evaluation knobs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalOptions {
    pub mode: EvalMode,
    pub prompt_variant: Option<PromptVariant>,
    /// Candidate count requested from the model.
    pub m: usize,
    /// When set, only the first `use_m` cached candidates feed pooling
    /// (candidate-count sweeps reuse one generation).
    pub use_m: Option<usize>,
    pub pooling: Pooling,
    pub normalize_before_pool: bool,
    pub p_k_list: Vec<usize>,
    pub acc_k_list: Vec<usize>,
    /// Ranked items kept per query for P@k and the trace.
    pub top_k: usize,
    pub fewshot_n: usize,
    pub fewshot_seed: u64,
    pub dispersion: RankDispersion,
    pub per_source: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            mode: EvalMode::Gear,
            prompt_variant: Some(PromptVariant::Bp1),
            m: 5,
            use_m: None,
            pooling: Pooling::Mean,
            normalize_before_pool: false,
            p_k_list: vec![1, 3, 5],
            acc_k_list: vec![1, 5, 10, 100, 1000],
            top_k: 10,
            fewshot_n: 5,
            fewshot_seed: 0,
            dispersion: RankDispersion::StdDev,
            per_source: true,
        }
    }
}

/// The moving parts a mode needs. Unused components may be None.
pub struct EvalComponents<'a> {
    pub generator: Option<&'a Generator>,
    pub embedder: Option<&'a Embedder>,
    pub index: Option<&'a VectorIndex>,
    /// Entry ids exemplars may be drawn from (e.g. the train split).
    pub fewshot_pool: Option<&'a [usize]>,
}

fn fold_set(terms: &[String]) -> HashSet<String> {
    terms.iter().map(|t| t.to_lowercase()).collect()
}

struct QueryCtx<'a> {
    corpus: &'a Corpus,
    opts: &'a EvalOptions,
    comps: &'a EvalComponents<'a>,
}

impl QueryCtx<'_> {
    fn generate(&self, definition: &str) -> Result<crate::prompt::CandidateSet> {
        let variant = self.opts.prompt_variant.expect("validated");
        let fewshot = if variant.wants_examples() {
            sample_fewshot_from(
                self.corpus,
                self.comps.fewshot_pool,
                self.opts.fewshot_n,
                self.opts.fewshot_seed,
                definition,
            )?
        } else {
            Vec::new()
        };
        let spec = PromptSpec {
            variant,
            k: self.opts.m,
            dictionary_name: self.corpus.name.clone(),
            dictionary_description: self.corpus.description.clone(),
            fewshot,
        };
        let mut cs = self
            .comps
            .generator
            .expect("validated")
            .generate(&spec, definition)?;
        if let Some(use_m) = self.opts.use_m {
            cs.candidates.truncate(use_m.max(1));
        }
        Ok(cs)
    }

    fn rank_against_index(
        &self,
        entry: &crate::corpus::DictionaryEntry,
        pooled: &PooledQuery,
        candidates: Option<Vec<String>>,
        degraded: bool,
    ) -> Result<QueryResult> {
        let index = self.comps.index.expect("validated");
        let gold_fold = fold_set(&entry.terms);
        let gold_ids: Vec<usize> = entry
            .terms
            .iter()
            .filter_map(|t| index.vocabulary().id(t))
            .collect();
        if gold_ids.is_empty() {
            return Ok(QueryResult {
                definition: entry.definition.clone(),
                gold_terms: entry.terms.clone(),
                sources: entry.source_set().iter().map(|s| s.to_string()).collect(),
                best_rank: None,
                gold_positions: Vec::new(),
                missing_gold: true,
                top_k_terms: Vec::new(),
                top_k_scores: Vec::new(),
                relevance_flags: Vec::new(),
                degraded,
                failed: false,
                candidates,
            });
        }
        let positions = positions_of(index, pooled, &gold_ids)?;
        let best = positions.iter().copied().min();
        let top = knn(index, pooled, self.opts.top_k)?;
        let top_terms: Vec<String> = top
            .term_ids
            .iter()
            .map(|&i| index.vocabulary().term(i).to_string())
            .collect();
        let flags: Vec<bool> = top_terms
            .iter()
            .map(|t| gold_fold.contains(&t.to_lowercase()))
            .collect();
        Ok(QueryResult {
            definition: entry.definition.clone(),
            gold_terms: entry.terms.clone(),
            sources: entry.source_set().iter().map(|s| s.to_string()).collect(),
            best_rank: best,
            gold_positions: positions,
            missing_gold: false,
            top_k_terms: top_terms,
            top_k_scores: top.scores,
            relevance_flags: flags,
            degraded,
            failed: false,
            candidates,
        })
    }

    fn run_one(&self, entry_id: usize) -> Result<QueryResult> {
        let entry = &self.corpus.entries[entry_id];
        match self.opts.mode {
            EvalMode::EmbeddingOnly => {
                let embedder = self.comps.embedder.expect("validated");
                let rows = embedder
                    .embed_texts(std::slice::from_ref(&entry.definition), TextRole::Query)?;
                let pooled = PooledQuery {
                    vector: rows.row(0).to_vec(),
                    pooling: Pooling::First,
                    m: 1,
                };
                self.rank_against_index(entry, &pooled, None, false)
            }
            EvalMode::LlmOnly => {
                let cs = match self.generate(&entry.definition) {
                    Ok(cs) => cs,
                    Err(Error::Generation { .. }) => return Ok(failed_result(entry)),
                    Err(e) => return Err(e),
                };
                let gold_fold = fold_set(&entry.terms);
                let flags: Vec<bool> = cs
                    .candidates
                    .iter()
                    .map(|c| gold_fold.contains(c))
                    .collect();
                Ok(QueryResult {
                    definition: entry.definition.clone(),
                    gold_terms: entry.terms.clone(),
                    sources: entry.source_set().iter().map(|s| s.to_string()).collect(),
                    best_rank: None,
                    gold_positions: Vec::new(),
                    missing_gold: false,
                    top_k_terms: cs.candidates.clone(),
                    top_k_scores: Vec::new(),
                    relevance_flags: flags,
                    degraded: cs.degraded,
                    failed: false,
                    candidates: Some(cs.candidates),
                })
            }
            EvalMode::Gear => {
                let embedder = self.comps.embedder.expect("validated");
                let cs = match self.generate(&entry.definition) {
                    Ok(cs) => cs,
                    Err(Error::Generation { .. }) => return Ok(failed_result(entry)),
                    Err(e) => return Err(e),
                };
                let rows = embedder.embed_texts(&cs.candidates, TextRole::Document)?;
                let pooled = pool(&rows, self.opts.pooling, self.opts.normalize_before_pool)?;
                self.rank_against_index(entry, &pooled, Some(cs.candidates), cs.degraded)
            }
        }
    }
}

fn failed_result(entry: &crate::corpus::DictionaryEntry) -> QueryResult {
    QueryResult {
        definition: entry.definition.clone(),
        gold_terms: entry.terms.clone(),
        sources: entry.source_set().iter().map(|s| s.to_string()).collect(),
        best_rank: None,
        gold_positions: Vec::new(),
        missing_gold: false,
        top_k_terms: Vec::new(),
        top_k_scores: Vec::new(),
        relevance_flags: Vec::new(),
        degraded: true,
        failed: true,
        candidates: None,
    }
}

fn validate(opts: &EvalOptions, comps: &EvalComponents) -> Result<()> {
    let need = |ok: bool, what: &str| {
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!(
                "mode {} requires {what}",
                opts.mode
            )))
        }
    };
    match opts.mode {
        EvalMode::EmbeddingOnly => {
            need(comps.embedder.is_some(), "an embedding provider")?;
            need(comps.index.is_some(), "a vector index")?;
        }
        EvalMode::LlmOnly => {
            need(comps.generator.is_some(), "a generation client")?;
            need(opts.prompt_variant.is_some(), "a prompt variant")?;
        }
        EvalMode::Gear => {
            need(comps.generator.is_some(), "a generation client")?;
            need(opts.prompt_variant.is_some(), "a prompt variant")?;
            need(comps.embedder.is_some(), "an embedding provider")?;
            need(comps.index.is_some(), "a vector index")?;
        }
    }
    if opts.m == 0 {
        return Err(Error::InvalidConfig("candidate count m must be >= 1".into()));
    }
    Ok(())
}

/// Metrics over one group of results. `ranked` is false for LLM-only
/// output, where rank-derived metrics are inapplicable.
pub fn compute_block(
    results: &[QueryResult],
    opts: &EvalOptions,
    ranked: bool,
) -> Result<MetricBlock> {
    let scored = results.iter().filter(|r| r.scored()).count();
    if scored == 0 {
        return Err(Error::UndefinedMetric(
            "no scorable queries after exclusions".into(),
        ));
    }
    let mut p_at = BTreeMap::new();
    for &k in &opts.p_k_list {
        p_at.insert(k, precision_at_k(results, k)?);
    }
    let mut acc_at = BTreeMap::new();
    for &k in &opts.acc_k_list {
        acc_at.insert(k, accuracy_at_k(results, k)?);
    }
    Ok(MetricBlock {
        queries: scored,
        mrr: if ranked { Some(mrr(results)?) } else { None },
        p_at,
        acc_at,
        median_rank: if ranked {
            Some(median_rank(results)?)
        } else {
            None
        },
        rank_std: if ranked {
            Some(rank_std(results, opts.dispersion)?)
        } else {
            None
        },
    })
}

/// Evaluate a test split. Returns the aggregated report and the per-query
/// results (for the trace file), ordered by `test_ids`.
pub fn evaluate(
    corpus: &Corpus,
    test_ids: &[usize],
    opts: &EvalOptions,
    comps: &EvalComponents,
) -> Result<(EvalReport, Vec<QueryResult>)> {
    validate(opts, comps)?;
    if test_ids.is_empty() {
        return Err(Error::UndefinedMetric("empty test split".into()));
    }
    let mut opts = opts.clone();
    if let Some(&max_p) = opts.p_k_list.iter().max() {
        opts.top_k = opts.top_k.max(max_p);
    }
    let ctx = QueryCtx {
        corpus,
        opts: &opts,
        comps,
    };

    #[cfg(feature = "parallel")]
    let results: Vec<QueryResult> = test_ids
        .par_iter()
        .map(|&id| ctx.run_one(id))
        .collect::<Result<_>>()?;
    #[cfg(not(feature = "parallel"))]
    let results: Vec<QueryResult> = test_ids
        .iter()
        .map(|&id| ctx.run_one(id))
        .collect::<Result<_>>()?;

    let ranked = opts.mode != EvalMode::LlmOnly;
    let aggregate = compute_block(&results, &opts, ranked)?;

    let mut per_source = BTreeMap::new();
    if opts.per_source {
        let mut groups: BTreeMap<String, Vec<QueryResult>> = BTreeMap::new();
        for r in &results {
            for s in &r.sources {
                groups.entry(s.clone()).or_default().push(r.clone());
            }
        }
        for (source, group) in groups {
            // Sources whose every query was excluded carry no block.
            if let Ok(block) = compute_block(&group, &opts, ranked) {
                per_source.insert(source, block);
            }
        }
    }

    let counts = EvalCounts {
        queries: results.len(),
        missing_gold: results.iter().filter(|r| r.missing_gold).count(),
        degraded: results.iter().filter(|r| r.degraded).count(),
        failed: results.iter().filter(|r| r.failed).count(),
    };
    let config = ConfigDescriptor {
        mode: opts.mode,
        prompt_variant: opts.prompt_variant,
        pooling: opts.pooling,
        candidates_m: opts.use_m.unwrap_or(opts.m),
        generation_model: None,
        embedding_model: comps.embedder.map(|e| e.model_id().to_string()),
        instruction_variant: comps
            .embedder
            .map(|e| e.instruction().variant.to_string()),
        p_k_list: opts.p_k_list.clone(),
        acc_k_list: opts.acc_k_list.clone(),
        top_k: opts.top_k,
    };
    let provenance = Provenance {
        run_config: String::new(),
        llm_cache_fingerprint: comps.generator.map(|g| g.fingerprint()),
        embed_cache_fingerprint: comps.embedder.map(|e| e.cache_fingerprint()),
    };
    Ok((
        EvalReport {
            config,
            counts,
            aggregate,
            per_source,
            provenance,
        },
        results,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn qr(best: Option<usize>, flags: Vec<bool>) -> QueryResult {
        QueryResult {
            definition: "d".into(),
            gold_terms: vec!["g".into()],
            sources: vec!["S".into()],
            best_rank: best,
            gold_positions: best.map(|b| vec![b]).unwrap_or_default(),
            missing_gold: false,
            top_k_terms: Vec::new(),
            top_k_scores: Vec::new(),
            relevance_flags: flags,
            degraded: false,
            failed: false,
            candidates: None,
        }
    }

    fn flags_for(best: usize, len: usize) -> Vec<bool> {
        (0..len).map(|i| i == best).collect()
    }

    #[test]
    fn mrr_single_top_hit() {
        let results = vec![qr(Some(0), flags_for(0, 5))];
        assert_eq!(mrr(&results).unwrap(), 1.0);
    }

    #[test]
    fn mrr_two_queries() {
        // 1-indexed ranks 1 and 2: (1 + 1/2) / 2 = 0.75
        let results = vec![qr(Some(0), flags_for(0, 5)), qr(Some(1), flags_for(1, 5))];
        assert_eq!(mrr(&results).unwrap(), 0.75);
    }

    #[test]
    fn mrr_matches_formula_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        for _ in 0..200 {
            let n = rng.gen_range(1..40);
            let ranks: Vec<usize> = (0..n).map(|_| rng.gen_range(0..10_000)).collect();
            let results: Vec<QueryResult> =
                ranks.iter().map(|&r| qr(Some(r), Vec::new())).collect();
            let oracle: f64 =
                ranks.iter().map(|&r| 1.0 / (r as f64 + 1.0)).sum::<f64>() / n as f64;
            assert!((mrr(&results).unwrap() - oracle).abs() < 1e-12);
        }
    }

    #[test]
    fn precision_single_hit_at_top() {
        let results = vec![qr(Some(0), flags_for(0, 5))];
        assert_eq!(precision_at_k(&results, 5).unwrap(), 0.2);
    }

    #[test]
    fn precision_all_relevant() {
        let results = vec![qr(Some(0), vec![true, true, true])];
        assert_eq!(precision_at_k(&results, 3).unwrap(), 1.0);
    }

    #[test]
    fn precision_matches_counting_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(22);
        for _ in 0..100 {
            let n = rng.gen_range(1..30);
            let results: Vec<QueryResult> = (0..n)
                .map(|_| {
                    let flags: Vec<bool> = (0..10).map(|_| rng.gen_bool(0.3)).collect();
                    let best = flags.iter().position(|&f| f);
                    qr(best.or(Some(9999)), flags)
                })
                .collect();
            for k in [1usize, 3, 5, 10] {
                let mut total = 0.0;
                for r in &results {
                    let mut hits = 0;
                    for i in 0..k {
                        if *r.relevance_flags.get(i).unwrap_or(&false) {
                            hits += 1;
                        }
                    }
                    total += hits as f64 / k as f64;
                }
                let oracle = total / n as f64;
                assert_eq!(precision_at_k(&results, k).unwrap(), oracle);
            }
        }
    }

    #[test]
    fn accuracy_boundaries() {
        let hit = vec![qr(Some(0), flags_for(0, 1))];
        assert_eq!(accuracy_at_k(&hit, 1).unwrap(), 1.0);
        // 0-indexed rank 10 is position 11: outside the top 10.
        let miss = vec![qr(Some(10), Vec::new())];
        assert_eq!(accuracy_at_k(&miss, 10).unwrap(), 0.0);
        assert_eq!(accuracy_at_k(&miss, 11).unwrap(), 1.0);
    }

    #[test]
    fn accuracy_matches_counting_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(23);
        for _ in 0..100 {
            let n = rng.gen_range(1..30);
            let ranks: Vec<usize> = (0..n).map(|_| rng.gen_range(0..100)).collect();
            let results: Vec<QueryResult> =
                ranks.iter().map(|&r| qr(Some(r), Vec::new())).collect();
            for k in [1usize, 5, 10, 100] {
                let oracle =
                    ranks.iter().filter(|&&r| r < k).count() as f64 / n as f64;
                assert_eq!(accuracy_at_k(&results, k).unwrap(), oracle);
            }
        }
    }

    #[test]
    fn median_of_odd_and_even_counts() {
        let odd = vec![qr(Some(0), vec![]), qr(Some(0), vec![]), qr(Some(5), vec![])];
        assert_eq!(median_rank(&odd).unwrap(), 0.0);
        let even = vec![qr(Some(1), vec![]), qr(Some(3), vec![])];
        assert_eq!(median_rank(&even).unwrap(), 2.0);
    }

    #[test]
    fn high_acc1_forces_median_zero() {
        let results: Vec<QueryResult> = (0..10)
            .map(|i| qr(Some(if i < 6 { 0 } else { 50 }), vec![]))
            .collect();
        assert!(accuracy_at_k(&results, 1).unwrap() > 0.5);
        assert_eq!(median_rank(&results).unwrap(), 0.0);
    }

    #[test]
    fn rank_std_values() {
        let equal = vec![qr(Some(4), vec![]), qr(Some(4), vec![])];
        assert_eq!(rank_std(&equal, RankDispersion::StdDev).unwrap(), 0.0);
        let pair = vec![qr(Some(0), vec![]), qr(Some(10), vec![])];
        assert_eq!(rank_std(&pair, RankDispersion::StdDev).unwrap(), 5.0);
        assert_eq!(rank_std(&pair, RankDispersion::Variance).unwrap(), 25.0);
    }

    #[test]
    fn rank_std_matches_formula_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(24);
        for _ in 0..100 {
            let n = rng.gen_range(1..50);
            let ranks: Vec<usize> = (0..n).map(|_| rng.gen_range(0..1000)).collect();
            let results: Vec<QueryResult> =
                ranks.iter().map(|&r| qr(Some(r), Vec::new())).collect();
            let mean = ranks.iter().sum::<usize>() as f64 / n as f64;
            let var =
                ranks.iter().map(|&r| (r as f64 - mean).powi(2)).sum::<f64>() / n as f64;
            let got = rank_std(&results, RankDispersion::StdDev).unwrap();
            assert!((got - var.sqrt()).abs() < 1e-9);
        }
    }

    #[test]
    fn missing_gold_is_excluded_not_counted() {
        let mut missing = qr(None, vec![]);
        missing.missing_gold = true;
        let results = vec![qr(Some(0), flags_for(0, 3)), missing];
        assert_eq!(mrr(&results).unwrap(), 1.0);
        assert_eq!(accuracy_at_k(&results, 1).unwrap(), 1.0);
    }

    #[test]
    fn all_excluded_is_undefined() {
        let mut missing = qr(None, vec![]);
        missing.missing_gold = true;
        assert!(matches!(
            mrr(&[missing]),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn k_zero_is_an_error() {
        let results = vec![qr(Some(0), vec![true])];
        assert!(precision_at_k(&results, 0).is_err());
        assert!(accuracy_at_k(&results, 0).is_err());
    }
}

#[cfg(test)]
mod properties {
    use super::*;
    use proptest::prelude::*;

    fn synth_results(ranks: &[usize], list_len: usize) -> Vec<QueryResult> {
        ranks
            .iter()
            .map(|&r| {
                let flags: Vec<bool> = (0..list_len).map(|i| i == r).collect();
                QueryResult {
                    definition: "d".into(),
                    gold_terms: vec!["g".into()],
                    sources: vec![],
                    best_rank: Some(r),
                    gold_positions: vec![r],
                    missing_gold: false,
                    top_k_terms: Vec::new(),
                    top_k_scores: Vec::new(),
                    relevance_flags: flags,
                    degraded: false,
                    failed: false,
                    candidates: None,
                }
            })
            .collect()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn acc_is_monotone_and_p_times_k_non_decreasing(
            ranks in prop::collection::vec(0usize..30, 1..25),
        ) {
            let results = synth_results(&ranks, 30);
            let mut prev_acc = 0.0;
            let mut prev_pk = 0.0;
            for k in 1..=30 {
                let acc = accuracy_at_k(&results, k).unwrap();
                let pk = precision_at_k(&results, k).unwrap() * k as f64;
                prop_assert!(acc + 1e-12 >= prev_acc);
                prop_assert!(pk + 1e-9 >= prev_pk);
                prev_acc = acc;
                prev_pk = pk;
            }
        }

        #[test]
        fn single_gold_acc1_equals_p1(ranks in prop::collection::vec(0usize..20, 1..25)) {
            let results = synth_results(&ranks, 20);
            let acc1 = accuracy_at_k(&results, 1).unwrap();
            let p1 = precision_at_k(&results, 1).unwrap();
            prop_assert!((acc1 - p1).abs() < 1e-12);
        }

        #[test]
        fn mrr_dominates_acc1(ranks in prop::collection::vec(0usize..50, 1..25)) {
            let results = synth_results(&ranks, 50);
            let m = mrr(&results).unwrap();
            let acc1 = accuracy_at_k(&results, 1).unwrap();
            prop_assert!(m + 1e-12 >= acc1);
            let all_top = ranks.iter().all(|&r| r == 0);
            prop_assert_eq!((m - 1.0).abs() < 1e-12, all_top);
        }
    }
}
