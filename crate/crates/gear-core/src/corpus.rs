//! Dictionary corpora in reverse-dictionary form: one definition mapped to
//! the list of terms it defines, with per-record source labels.
//!
//! A corpus is built by grouping raw `(term, definition, source)` records by
//! definition text. Definitions are whitespace-collapsed before grouping and
//! terms are deduplicated case-insensitively within one entry (first-seen
//! casing kept). Source labels survive per surviving `(term, source)` pair,
//! so an entry's source list can be longer than its term list when the same
//! term arrives from several dictionaries.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One reverse-dictionary entry: a definition and the terms it defines.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DictionaryEntry {
    pub definition: String,
    pub terms: Vec<String>,
    pub sources: Vec<String>,
}

impl DictionaryEntry {
    /// Unique source labels of this entry, in first-appearance order.
    pub fn source_set(&self) -> Vec<&str> {
        let mut seen = HashSet::new();
        self.sources
            .iter()
            .filter(|s| seen.insert(s.as_str()))
            .map(|s| s.as_str())
            .collect()
    }
}

/// A dictionary in reverse-dictionary form.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corpus {
    pub name: String,
    pub description: String,
    pub entries: Vec<DictionaryEntry>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Manifest pointing at a corpus file, carrying the dictionary name and the
/// resource description slotted into prompts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub name: String,
    pub description: String,
    pub path: String,
}

/// Train/valid/test partition of entry ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSplit {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
}

/// The search space: all unique terms of a corpus, sorted by byte order so
/// that term ids are reproducible.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    terms: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn terms(&self) -> &[String] {
        &self.terms
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn term(&self, id: usize) -> &str {
        &self.terms[id]
    }

    pub fn id(&self, term: &str) -> Option<usize> {
        self.ids.get(term).copied()
    }

    pub fn from_terms(terms: Vec<String>) -> Self {
        let ids = terms
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self { terms, ids }
    }
}

/// Supported on-disk corpus formats.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusFormat {
    Jsonl,
    Csv,
    Tsv,
}

impl std::str::FromStr for CorpusFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "jsonl" => Ok(Self::Jsonl),
            "csv" => Ok(Self::Csv),
            "tsv" => Ok(Self::Tsv),
            other => Err(Error::InvalidConfig(format!(
                "unknown corpus format {other:?} (expected jsonl, csv, or tsv)"
            ))),
        }
    }
}

impl fmt::Display for CorpusFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Jsonl => write!(f, "jsonl"),
            Self::Csv => write!(f, "csv"),
            Self::Tsv => write!(f, "tsv"),
        }
    }
}

/// Collapse internal whitespace to single spaces and trim.
pub fn normalize_text(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Serialize, Deserialize)]
struct CanonicalRecord {
    definition: String,
    terms: Vec<String>,
    #[serde(default)]
    sources: Vec<String>,
}

/// Incremental grouping of records by normalized definition text.
struct Aggregator {
    order: Vec<String>,
    groups: HashMap<String, DictionaryEntry>,
    seen_pairs: HashSet<(String, String, String)>,
}

impl Aggregator {
    fn new() -> Self {
        Self {
            order: Vec::new(),
            groups: HashMap::new(),
            seen_pairs: HashSet::new(),
        }
    }

    fn entry_mut(&mut self, definition: String) -> &mut DictionaryEntry {
        if !self.groups.contains_key(&definition) {
            self.order.push(definition.clone());
            self.groups.insert(
                definition.clone(),
                DictionaryEntry {
                    definition: definition.clone(),
                    terms: Vec::new(),
                    sources: Vec::new(),
                },
            );
        }
        self.groups.get_mut(&definition).unwrap()
    }

    /// Add one `(term, source)` pair under a definition. Exact duplicate
    /// pairs (case-folded term) are dropped; a known term arriving from a
    /// new source keeps the extra source label.
    fn add_pair(&mut self, definition: &str, term: &str, source: &str) {
        let definition = normalize_text(definition);
        let term = normalize_text(term);
        if definition.is_empty() || term.is_empty() {
            return;
        }
        let key = (
            definition.clone(),
            term.to_lowercase(),
            source.to_string(),
        );
        if !self.seen_pairs.insert(key) {
            return;
        }
        let entry = self.entry_mut(definition);
        let folded = term.to_lowercase();
        if !entry.terms.iter().any(|t| t.to_lowercase() == folded) {
            entry.terms.push(term);
        }
        entry.sources.push(source.to_string());
    }

    /// Add a pre-grouped record. Terms and sources pair up positionally when
    /// the lengths match; otherwise the record is merged as a unit.
    fn add_record(&mut self, rec: CanonicalRecord, default_source: &str) {
        if rec.sources.len() == rec.terms.len() && !rec.terms.is_empty() {
            for (t, s) in rec.terms.iter().zip(rec.sources.iter()) {
                self.add_pair(&rec.definition, t, s);
            }
        } else if rec.sources.is_empty() {
            for t in &rec.terms {
                self.add_pair(&rec.definition, t, default_source);
            }
        } else {
            let definition = normalize_text(&rec.definition);
            if definition.is_empty() {
                return;
            }
            let entry = self.entry_mut(definition);
            for t in &rec.terms {
                let term = normalize_text(t);
                if term.is_empty() {
                    continue;
                }
                let folded = term.to_lowercase();
                if !entry.terms.iter().any(|x| x.to_lowercase() == folded) {
                    entry.terms.push(term);
                }
            }
            for s in &rec.sources {
                entry.sources.push(s.clone());
            }
        }
    }

    fn finish(mut self, name: String, description: String) -> Corpus {
        let entries = self
            .order
            .iter()
            .map(|d| self.groups.remove(d).unwrap())
            .filter(|e| !e.terms.is_empty())
            .collect();
        Corpus {
            name,
            description,
            entries,
        }
    }
}

/// Group raw `(term, definition, source)` triples into a corpus.
pub fn aggregate_rd(name: &str, pairs: &[(String, String, String)]) -> Result<Corpus> {
    if pairs.is_empty() {
        return Err(Error::EmptyCorpus(name.to_string()));
    }
    let mut agg = Aggregator::new();
    for (term, definition, source) in pairs {
        agg.add_pair(definition, term, source);
    }
    let corpus = agg.finish(name.to_string(), String::new());
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus(name.to_string()));
    }
    Ok(corpus)
}

/// Load a corpus file, aggregating records that share a definition.
///
/// JSONL records are `{"definition": .., "terms": [..], "sources": [..]}`
/// with `sources` optional. CSV/TSV files carry a header with columns
/// `definition, terms, sources` where the list columns are `|`-separated.
/// Records without sources default to the corpus name.
pub fn load_corpus(path: &Path, format: CorpusFormat) -> Result<Corpus> {
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "corpus".to_string());
    let mut agg = Aggregator::new();
    let display = path.display().to_string();
    match format {
        CorpusFormat::Jsonl => {
            let file = std::fs::File::open(path)?;
            let mut any = false;
            for (lineno, line) in BufReader::new(file).lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                any = true;
                let rec: CanonicalRecord =
                    serde_json::from_str(&line).map_err(|e| Error::MalformedRecord {
                        path: display.clone(),
                        line: lineno + 1,
                        reason: e.to_string(),
                    })?;
                validate_record(&rec, &display, lineno + 1)?;
                agg.add_record(rec, &name);
            }
            if !any {
                return Err(Error::EmptyCorpus(display));
            }
        }
        CorpusFormat::Csv | CorpusFormat::Tsv => {
            let delim = if format == CorpusFormat::Csv { b',' } else { b'\t' };
            let mut rdr = csv::ReaderBuilder::new()
                .delimiter(delim)
                .flexible(true)
                .from_path(path)?;
            let headers = rdr.headers().map_err(|e| Error::MalformedRecord {
                path: display.clone(),
                line: 1,
                reason: e.to_string(),
            })?;
            let col = |name: &str| headers.iter().position(|h| h == name);
            let def_col = col("definition").ok_or_else(|| Error::MalformedRecord {
                path: display.clone(),
                line: 1,
                reason: "missing `definition` column".into(),
            })?;
            let terms_col = col("terms").ok_or_else(|| Error::MalformedRecord {
                path: display.clone(),
                line: 1,
                reason: "missing `terms` column".into(),
            })?;
            let sources_col = col("sources");
            let mut any = false;
            for (i, row) in rdr.records().enumerate() {
                let lineno = i + 2; // header is line 1
                let row = row.map_err(|e| Error::MalformedRecord {
                    path: display.clone(),
                    line: lineno,
                    reason: e.to_string(),
                })?;
                any = true;
                let get = |c: usize| row.get(c).unwrap_or("").to_string();
                let rec = CanonicalRecord {
                    definition: get(def_col),
                    terms: split_list(&get(terms_col)),
                    sources: sources_col.map(|c| split_list(&get(c))).unwrap_or_default(),
                };
                validate_record(&rec, &display, lineno)?;
                agg.add_record(rec, &name);
            }
            if !any {
                return Err(Error::EmptyCorpus(display));
            }
        }
    }
    let corpus = agg.finish(name, String::new());
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus(display));
    }
    Ok(corpus)
}

fn split_list(s: &str) -> Vec<String> {
    s.split('|')
        .map(|p| p.trim().to_string())
        .filter(|p| !p.is_empty())
        .collect()
}

fn validate_record(rec: &CanonicalRecord, path: &str, line: usize) -> Result<()> {
    if normalize_text(&rec.definition).is_empty() {
        return Err(Error::MalformedRecord {
            path: path.to_string(),
            line,
            reason: "empty definition".into(),
        });
    }
    if rec.terms.iter().all(|t| normalize_text(t).is_empty()) {
        return Err(Error::MalformedRecord {
            path: path.to_string(),
            line,
            reason: "record has no terms".into(),
        });
    }
    Ok(())
}

/// Load a corpus through its manifest, taking name and description from it.
pub fn load_manifest(path: &Path) -> Result<Corpus> {
    let text = std::fs::read_to_string(path)?;
    let manifest: CorpusManifest = serde_json::from_str(&text).map_err(|e| {
        Error::MalformedRecord {
            path: path.display().to_string(),
            line: 1,
            reason: e.to_string(),
        }
    })?;
    let corpus_path = path
        .parent()
        .map(|p| p.join(&manifest.path))
        .unwrap_or_else(|| manifest.path.clone().into());
    let format = match corpus_path.extension().and_then(|e| e.to_str()) {
        Some("csv") => CorpusFormat::Csv,
        Some("tsv") => CorpusFormat::Tsv,
        _ => CorpusFormat::Jsonl,
    };
    let mut corpus = load_corpus(&corpus_path, format)?;
    corpus.name = manifest.name;
    corpus.description = manifest.description;
    Ok(corpus)
}

/// Write the canonical line-delimited form. `load_corpus` of the output
/// reproduces the corpus exactly.
pub fn save_corpus(corpus: &Corpus, w: &mut dyn Write) -> Result<()> {
    for e in &corpus.entries {
        let rec = CanonicalRecord {
            definition: e.definition.clone(),
            terms: e.terms.clone(),
            sources: e.sources.clone(),
        };
        let line = serde_json::to_string(&rec)
            .map_err(|e| Error::InvalidConfig(format!("serialize record: {e}")))?;
        writeln!(w, "{line}")?;
    }
    Ok(())
}

fn check_ratios(ratios: (f64, f64, f64)) -> Result<()> {
    let sum = ratios.0 + ratios.1 + ratios.2;
    if (sum - 1.0).abs() > 1e-9 || ratios.0 < 0.0 || ratios.1 < 0.0 || ratios.2 < 0.0 {
        return Err(Error::InvalidRatios(sum));
    }
    Ok(())
}

/// Shuffle ids under the seed, then cut train = floor(r0*N),
/// valid = floor(r1*N), test = remainder.
fn split_ids(mut ids: Vec<usize>, seed: u64, ratios: (f64, f64, f64)) -> CorpusSplit {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let n = ids.len();
    let n_train = (ratios.0 * n as f64).floor() as usize;
    let n_valid = (ratios.1 * n as f64).floor() as usize;
    let train = ids[..n_train].to_vec();
    let valid = ids[n_train..n_train + n_valid].to_vec();
    let test = ids[n_train + n_valid..].to_vec();
    CorpusSplit {
        train,
        valid,
        test,
        seed,
    }
}

/// Deterministic random split of a corpus into train/valid/test entry ids.
pub fn random_split(corpus: &Corpus, seed: u64, ratios: (f64, f64, f64)) -> Result<CorpusSplit> {
    check_ratios(ratios)?;
    if corpus.len() < 3 {
        return Err(Error::CorpusTooSmall {
            need: 3,
            have: corpus.len(),
        });
    }
    Ok(split_ids((0..corpus.len()).collect(), seed, ratios))
}

/// Partition entries by source label, then split each sub-corpus. Entries
/// carrying several sources appear in every matching sub-corpus. Ids refer
/// to the original corpus.
pub fn source_split(
    corpus: &Corpus,
    seed: u64,
    ratios: (f64, f64, f64),
) -> Result<BTreeMap<String, CorpusSplit>> {
    check_ratios(ratios)?;
    let mut by_source: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (id, entry) in corpus.entries.iter().enumerate() {
        for s in entry.source_set() {
            by_source.entry(s.to_string()).or_default().push(id);
        }
    }
    Ok(by_source
        .into_iter()
        .map(|(source, ids)| (source, split_ids(ids, seed, ratios)))
        .collect())
}

/// All unique terms of a corpus, sorted by byte order.
pub fn vocabulary(corpus: &Corpus) -> Result<Vocabulary> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus(corpus.name.clone()));
    }
    let mut terms: Vec<String> = corpus
        .entries
        .iter()
        .flat_map(|e| e.terms.iter().cloned())
        .collect::<HashSet<_>>()
        .into_iter()
        .collect();
    terms.sort_unstable();
    Ok(Vocabulary::from_terms(terms))
}
