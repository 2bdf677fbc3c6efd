//! The average and rank steps: pool candidate embeddings into one query
//! vector and run exact cosine KNN over the vocabulary matrix.
//!
//! Search is an exact brute-force scan. Scores are computed row by row with
//! plain sequential accumulation so the sequential and rayon paths produce
//! bit-identical results; ties break by ascending term id.

use std::path::Path;

#[cfg(feature = "parallel")]
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Vocabulary;
use crate::embed::{Embedder, EmbeddingCache, InstructionVariant, TextRole};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Immutable vocabulary matrix with precomputed row norms.
#[derive(Debug)]
pub struct VectorIndex {
    vocabulary: Vocabulary,
    matrix: Matrix,
    row_norms: Vec<f32>,
    pub model_id: String,
    pub instruction_variant: InstructionVariant,
}

/// How candidate embeddings reduce to one query vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    #[default]
    Mean,
    Max,
    /// Use only the first candidate.
    First,
}

impl std::fmt::Display for Pooling {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Mean => write!(f, "mean"),
            Self::Max => write!(f, "max"),
            Self::First => write!(f, "first"),
        }
    }
}

impl std::str::FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mean" => Ok(Self::Mean),
            "max" => Ok(Self::Max),
            "first" => Ok(Self::First),
            other => Err(Error::InvalidConfig(format!("unknown pooling {other:?}"))),
        }
    }
}

/// The pooled query vector.
#[derive(Debug, Clone)]
pub struct PooledQuery {
    pub vector: Vec<f32>,
    pub pooling: Pooling,
    /// Candidate count that produced the vector.
    pub m: usize,
}

/// Search output: term ids best-first with their cosine scores.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedResult {
    pub term_ids: Vec<usize>,
    pub scores: Vec<f32>,
}

/// Componentwise arithmetic mean over rows.
pub fn mean_pool(rows: &Matrix) -> Result<Vec<f32>> {
    if rows.rows() == 0 {
        return Err(Error::InvalidConfig("mean_pool over zero rows".into()));
    }
    let m = rows.rows() as f32;
    let mut out = vec![0.0f32; rows.dim()];
    for row in rows.iter_rows() {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    for o in &mut out {
        *o /= m;
    }
    Ok(out)
}

/// Componentwise maximum over rows.
pub fn max_pool(rows: &Matrix) -> Result<Vec<f32>> {
    if rows.rows() == 0 {
        return Err(Error::InvalidConfig("max_pool over zero rows".into()));
    }
    let mut out = rows.row(0).to_vec();
    for row in rows.iter_rows().skip(1) {
        for (o, v) in out.iter_mut().zip(row) {
            if *v > *o {
                *o = *v;
            }
        }
    }
    Ok(out)
}

/// Pool rows under the chosen strategy, optionally normalizing each row to
/// unit length first.
pub fn pool(rows: &Matrix, pooling: Pooling, normalize_first: bool) -> Result<PooledQuery> {
    if rows.rows() == 0 {
        return Err(Error::InvalidConfig("pooling over zero rows".into()));
    }
    let owned;
    let rows = if normalize_first {
        let mut m = Matrix::with_capacity(rows.dim(), rows.rows());
        for row in rows.iter_rows() {
            let n = norm(row);
            if n == 0.0 {
                return Err(Error::ZeroVector("candidate embedding".into()));
            }
            let scaled: Vec<f32> = row.iter().map(|v| v / n).collect();
            m.push_row(&scaled)?;
        }
        owned = m;
        &owned
    } else {
        rows
    };
    let vector = match pooling {
        Pooling::Mean => mean_pool(rows)?,
        Pooling::Max => max_pool(rows)?,
        Pooling::First => rows.row(0).to_vec(),
    };
    Ok(PooledQuery {
        vector,
        pooling,
        m: rows.rows(),
    })
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f32]) -> f32 {
    dot(a, a).sqrt()
}

/// Cosine similarity, clamped to [-1, 1] against rounding.
pub fn cosine(a: &[f32], b: &[f32]) -> Result<f32> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector("cosine of zero vector".into()));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

impl VectorIndex {
    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocabulary
    }

    pub fn len(&self) -> usize {
        self.vocabulary.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vocabulary.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.matrix.dim()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    /// Build directly from a term-aligned matrix. Rejects empty input and
    /// all-zero rows.
    pub fn from_parts(
        vocabulary: Vocabulary,
        matrix: Matrix,
        model_id: &str,
        instruction_variant: InstructionVariant,
    ) -> Result<Self> {
        if vocabulary.is_empty() {
            return Err(Error::EmptyCorpus("vocabulary".into()));
        }
        if matrix.rows() != vocabulary.len() {
            return Err(Error::InvalidConfig(format!(
                "matrix has {} rows for {} terms",
                matrix.rows(),
                vocabulary.len()
            )));
        }
        let mut row_norms = Vec::with_capacity(matrix.rows());
        for (i, row) in matrix.iter_rows().enumerate() {
            let n = norm(row);
            if n == 0.0 {
                return Err(Error::ZeroVector(vocabulary.term(i).to_string()));
            }
            row_norms.push(n);
        }
        Ok(Self {
            vocabulary,
            matrix,
            row_norms,
            model_id: model_id.to_string(),
            instruction_variant,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut cache =
            EmbeddingCache::new(&self.model_id, self.matrix.dim(), self.instruction_variant);
        for (i, term) in self.vocabulary.terms().iter().enumerate() {
            cache.insert(term, self.matrix.row(i))?;
        }
        cache.save(dir)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let cache = EmbeddingCache::load(dir)?;
        let terms = cache.texts().to_vec();
        let dim = cache.dimension;
        let model_id = cache.model_id.clone();
        let variant = cache.variant;
        let mut matrix = Matrix::with_capacity(dim, terms.len());
        for t in &terms {
            matrix.push_row(cache.get(t).ok_or_else(|| {
                Error::CorruptCache(format!("missing row for term {t:?}"))
            })?)?;
        }
        Self::from_parts(Vocabulary::from_terms(terms), matrix, &model_id, variant)
    }
}

/// Embed every vocabulary term (document role, vocabulary order) and build
/// the index.
pub fn build_index(vocabulary: &Vocabulary, embedder: &Embedder) -> Result<VectorIndex> {
    if vocabulary.is_empty() {
        return Err(Error::EmptyCorpus("vocabulary".into()));
    }
    let matrix = embedder.embed_texts(vocabulary.terms(), TextRole::Document)?;
    VectorIndex::from_parts(
        vocabulary.clone(),
        matrix,
        embedder.model_id(),
        embedder.instruction().variant,
    )
}

fn query_norm(index: &VectorIndex, query: &[f32]) -> Result<f32> {
    if query.len() != index.dim() {
        return Err(Error::DimensionMismatch {
            expected: index.dim(),
            got: query.len(),
        });
    }
    let qn = norm(query);
    if qn == 0.0 {
        return Err(Error::ZeroVector("query vector".into()));
    }
    Ok(qn)
}

#[inline]
fn row_score(index: &VectorIndex, query: &[f32], qn: f32, i: usize) -> f32 {
    (dot(query, index.matrix.row(i)) / (qn * index.row_norms[i])).clamp(-1.0, 1.0)
}

fn scores_sequential(index: &VectorIndex, query: &[f32], qn: f32) -> Vec<f32> {
    (0..index.len())
        .map(|i| row_score(index, query, qn, i))
        .collect()
}

#[cfg(feature = "parallel")]
fn scores_parallel(index: &VectorIndex, query: &[f32], qn: f32) -> Vec<f32> {
    (0..index.len())
        .into_par_iter()
        .map(|i| row_score(index, query, qn, i))
        .collect()
}

/// Best-first comparator: score descending, term id ascending on ties.
#[inline]
fn better(scores: &[f32], a: usize, b: usize) -> std::cmp::Ordering {
    scores[b].total_cmp(&scores[a]).then_with(|| a.cmp(&b))
}

fn top_k_from_scores(scores: Vec<f32>, k: usize) -> RankedResult {
    let n = scores.len();
    let k = k.min(n);
    let mut ids: Vec<usize> = (0..n).collect();
    if k < n {
        ids.select_nth_unstable_by(k, |&a, &b| better(&scores, a, b));
        ids.truncate(k);
    }
    ids.sort_unstable_by(|&a, &b| better(&scores, a, b));
    let top_scores = ids.iter().map(|&i| scores[i]).collect();
    RankedResult {
        term_ids: ids,
        scores: top_scores,
    }
}

/// Exact top-k cosine search, single-threaded scan.
pub fn knn_sequential(index: &VectorIndex, query: &PooledQuery, k: usize) -> Result<RankedResult> {
    let qn = query_norm(index, &query.vector)?;
    Ok(top_k_from_scores(
        scores_sequential(index, &query.vector, qn),
        k,
    ))
}

/// Exact top-k cosine search with the scan partitioned across threads. The
/// per-row scores are identical to the sequential path, so the merged
/// ranking is too.
#[cfg(feature = "parallel")]
pub fn knn_parallel(index: &VectorIndex, query: &PooledQuery, k: usize) -> Result<RankedResult> {
    let qn = query_norm(index, &query.vector)?;
    Ok(top_k_from_scores(
        scores_parallel(index, &query.vector, qn),
        k,
    ))
}

/// Exact top-k cosine search over the vocabulary.
pub fn knn(index: &VectorIndex, query: &PooledQuery, k: usize) -> Result<RankedResult> {
    #[cfg(feature = "parallel")]
    {
        // Small scans are not worth the fork/join overhead.
        if index.len() >= 4096 {
            return knn_parallel(index, query, k);
        }
    }
    knn_sequential(index, query, k)
}

/// Full-ranking positions (0-indexed) of the given term ids, without
/// materializing the sort: position = number of strictly better rows.
pub fn positions_of(index: &VectorIndex, query: &PooledQuery, ids: &[usize]) -> Result<Vec<usize>> {
    let qn = query_norm(index, &query.vector)?;
    let scores = {
        #[cfg(feature = "parallel")]
        {
            if index.len() >= 4096 {
                scores_parallel(index, &query.vector, qn)
            } else {
                scores_sequential(index, &query.vector, qn)
            }
        }
        #[cfg(not(feature = "parallel"))]
        {
            scores_sequential(index, &query.vector, qn)
        }
    };
    Ok(ids
        .iter()
        .map(|&g| {
            let gs = scores[g];
            scores
                .iter()
                .enumerate()
                .filter(|&(i, &s)| s > gs || (s == gs && i < g))
                .count()
        })
        .collect())
}

/// Minimum 0-indexed full-ranking position over the gold terms.
pub fn rank_of(index: &VectorIndex, query: &PooledQuery, gold: &[String]) -> Result<usize> {
    let ids: Vec<usize> = gold
        .iter()
        .filter_map(|t| index.vocabulary.id(t))
        .collect();
    if ids.is_empty() {
        return Err(Error::MissingGold(format!("{gold:?}")));
    }
    let positions = positions_of(index, query, &ids)?;
    Ok(positions.into_iter().min().unwrap())
}

/// Score many queries against the index, one result per query, sequentially.
pub fn knn_batch_sequential(
    index: &VectorIndex,
    queries: &[PooledQuery],
    k: usize,
) -> Result<Vec<RankedResult>> {
    queries.iter().map(|q| knn_sequential(index, q, k)).collect()
}

/// Score many queries in parallel across queries.
#[cfg(feature = "parallel")]
pub fn knn_batch_parallel(
    index: &VectorIndex,
    queries: &[PooledQuery],
    k: usize,
) -> Result<Vec<RankedResult>> {
    queries
        .par_iter()
        .map(|q| knn_sequential(index, q, k))
        .collect()
}


#[cfg(test)]
mod properties {
    use super::*;
    use crate::embed::InstructionVariant;
    use proptest::prelude::*;

    fn index_and_query(
        n_terms: usize,
        dim: usize,
        seed: u64,
    ) -> (VectorIndex, PooledQuery) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let terms: Vec<String> = (0..n_terms).map(|i| format!("t{i:04}")).collect();
        let mut matrix = Matrix::with_capacity(dim, n_terms);
        for _ in 0..n_terms {
            let row: Vec<f32> = (0..dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
            matrix.push_row(&row).unwrap();
        }
        let index = VectorIndex::from_parts(
            Vocabulary::from_terms(terms),
            matrix,
            "p",
            InstructionVariant::None,
        )
        .unwrap();
        let query = PooledQuery {
            vector: (0..dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
            pooling: Pooling::Mean,
            m: 1,
        };
        (index, query)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn full_knn_is_a_permutation(n in 2usize..60, seed in any::<u64>()) {
            let (index, query) = index_and_query(n, 8, seed);
            let result = knn(&index, &query, n).unwrap();
            let mut ids = result.term_ids.clone();
            ids.sort_unstable();
            prop_assert_eq!(ids, (0..n).collect::<Vec<_>>());
        }

        #[test]
        fn scores_non_increasing_and_bounded(n in 2usize..60, seed in any::<u64>()) {
            let (index, query) = index_and_query(n, 8, seed);
            let result = knn(&index, &query, n).unwrap();
            for w in result.scores.windows(2) {
                prop_assert!(w[0] >= w[1]);
            }
            for s in &result.scores {
                prop_assert!((-1.0..=1.0).contains(s));
            }
        }

        #[test]
        fn ranking_invariant_under_power_of_two_scaling(
            n in 2usize..40,
            seed in any::<u64>(),
            exp in -2i32..4,
        ) {
            let (index, query) = index_and_query(n, 8, seed);
            let c = 2.0f32.powi(exp);
            let scaled = PooledQuery {
                vector: query.vector.iter().map(|v| c * v).collect(),
                pooling: query.pooling,
                m: query.m,
            };
            let a = knn(&index, &query, n).unwrap();
            let b = knn(&index, &scaled, n).unwrap();
            prop_assert_eq!(a.term_ids, b.term_ids);
        }

        #[test]
        fn mean_and_max_agree_on_single_row(dim in 1usize..32, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let row: Vec<f32> = (0..dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
            let m = Matrix::from_rows(dim, &[row.clone()]).unwrap();
            let mean = pool(&m, Pooling::Mean, false).unwrap();
            let max = pool(&m, Pooling::Max, false).unwrap();
            let first = pool(&m, Pooling::First, false).unwrap();
            prop_assert_eq!(&mean.vector, &row);
            prop_assert_eq!(&max.vector, &row);
            prop_assert_eq!(&first.vector, &row);
        }
    }
}
