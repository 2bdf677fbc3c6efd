//! Prompt rendering and response parsing for the generation step.
//!
//! The three prompt variants live as template files under `templates/` and
//! are rendered by substituting the `{definition}`, `{k}`, `{dictionary}`,
//! `{description}` and `{examples}` placeholders. Substituted values are
//! inserted verbatim and never rescanned, so literal braces in templates or
//! values pass through untouched.

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::corpus::{normalize_text, Corpus};
use crate::error::{Error, Result};

pub const TEMPLATE_BP1: &str = include_str!("../templates/bp1.txt");
pub const TEMPLATE_BP2: &str = include_str!("../templates/bp2.txt");
pub const TEMPLATE_RP: &str = include_str!("../templates/rp.txt");

/// The three prompt styles: bare task description, task plus few-shot
/// exemplars, and the exemplar prompt that also asks for usage sentences.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptVariant {
    Bp1,
    Bp2,
    Rp,
}

impl PromptVariant {
    pub fn template(&self) -> &'static str {
        match self {
            Self::Bp1 => TEMPLATE_BP1,
            Self::Bp2 => TEMPLATE_BP2,
            Self::Rp => TEMPLATE_RP,
        }
    }

    pub fn wants_examples(&self) -> bool {
        matches!(self, Self::Bp2 | Self::Rp)
    }
}

impl fmt::Display for PromptVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Bp1 => write!(f, "bp1"),
            Self::Bp2 => write!(f, "bp2"),
            Self::Rp => write!(f, "rp"),
        }
    }
}

impl std::str::FromStr for PromptVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bp1" => Ok(Self::Bp1),
            "bp2" => Ok(Self::Bp2),
            "rp" => Ok(Self::Rp),
            other => Err(Error::InvalidConfig(format!(
                "unknown prompt variant {other:?} (expected bp1, bp2, or rp)"
            ))),
        }
    }
}

/// Everything needed to render a prompt for one definition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSpec {
    pub variant: PromptVariant,
    /// Requested candidate count, substituted for `{k}`.
    pub k: usize,
    pub dictionary_name: String,
    pub dictionary_description: String,
    /// `(definition, term)` exemplars; empty for bp1.
    pub fewshot: Vec<(String, String)>,
}

impl PromptSpec {
    fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Prompt("candidate count k must be >= 1".into()));
        }
        if self.dictionary_description.trim().is_empty() {
            return Err(Error::Prompt(format!(
                "prompt variant {} requires a dictionary description",
                self.variant
            )));
        }
        if self.variant.wants_examples() && self.fewshot.is_empty() {
            return Err(Error::Prompt(format!(
                "prompt variant {} requires few-shot exemplars",
                self.variant
            )));
        }
        if !self.variant.wants_examples() && !self.fewshot.is_empty() {
            return Err(Error::Prompt(
                "prompt variant bp1 takes no few-shot exemplars".into(),
            ));
        }
        Ok(())
    }
}

/// One `definition: "<d>" -> term: "<t>"` line per exemplar, starting on a
/// fresh line after the template's colon.
fn serialize_fewshot(pairs: &[(String, String)]) -> String {
    let mut out = String::new();
    for (d, t) in pairs {
        out.push('\n');
        out.push_str(&format!("definition: \"{d}\" -> term: \"{t}\""));
    }
    out
}

/// Single-pass placeholder substitution. Unknown `{...}` runs are copied
/// literally; substituted values are never rescanned.
fn fill_template(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let bytes = template.as_bytes();
    let mut i = 0;
    'outer: while i < bytes.len() {
        if bytes[i] == b'{' {
            for (name, value) in vars {
                let token_len = name.len() + 2;
                if template[i..].starts_with(&format!("{{{name}}}")) {
                    out.push_str(value);
                    i += token_len;
                    continue 'outer;
                }
            }
        }
        let ch = template[i..].chars().next().unwrap();
        out.push(ch);
        i += ch.len_utf8();
    }
    out
}

/// Render the prompt for `definition` under the given spec.
pub fn render_prompt(spec: &PromptSpec, definition: &str) -> Result<String> {
    spec.validate()?;
    if definition.trim().is_empty() {
        return Err(Error::Prompt("definition is empty".into()));
    }
    let k = spec.k.to_string();
    let examples = serialize_fewshot(&spec.fewshot);
    let vars: Vec<(&str, &str)> = vec![
        ("definition", definition),
        ("k", &k),
        ("dictionary", &spec.dictionary_name),
        ("description", &spec.dictionary_description),
        ("examples", &examples),
    ];
    Ok(fill_template(spec.variant.template(), &vars))
}

/// Deterministically sample `n` `(definition, first-term)` exemplars,
/// never drawing the entry whose definition equals `exclude`.
pub fn sample_fewshot(
    corpus: &Corpus,
    n: usize,
    seed: u64,
    exclude: &str,
) -> Result<Vec<(String, String)>> {
    sample_fewshot_from(corpus, None, n, seed, exclude)
}

/// Like [`sample_fewshot`] but restricted to the given entry ids (e.g. a
/// train split) when provided.
pub fn sample_fewshot_from(
    corpus: &Corpus,
    pool: Option<&[usize]>,
    n: usize,
    seed: u64,
    exclude: &str,
) -> Result<Vec<(String, String)>> {
    let excluded = normalize_text(exclude);
    let mut eligible: Vec<usize> = match pool {
        Some(ids) => ids.to_vec(),
        None => (0..corpus.len()).collect(),
    };
    eligible.retain(|&i| corpus.entries[i].definition != excluded);
    if eligible.len() < n {
        return Err(Error::CorpusTooSmall {
            need: n,
            have: eligible.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    eligible.shuffle(&mut rng);
    eligible.truncate(n);
    Ok(eligible
        .into_iter()
        .map(|i| {
            let e = &corpus.entries[i];
            (e.definition.clone(), e.terms[0].clone())
        })
        .collect())
}

/// Generated candidates for one definition, after parsing and cleanup.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub definition: String,
    /// Lowercased, order-preserving deduped, truncated to the requested k.
    pub candidates: Vec<String>,
    pub raw_response: String,
    pub variant: PromptVariant,
    /// Usage sentences, present for the rp variant when the model gave them.
    pub examples: Option<Vec<String>>,
    /// True when the structured parse failed and candidates came from the
    /// line-based fallback.
    pub degraded: bool,
}

/// Locate the first well-formed JSON object in free-form text, skipping
/// code fences and prose. Falls back to a single-quote repair when the
/// braced block contains no double quotes at all.
fn first_json_object(raw: &str) -> Option<Value> {
    for (pos, _) in raw.match_indices('{') {
        let mut stream = serde_json::Deserializer::from_str(&raw[pos..]).into_iter::<Value>();
        if let Some(Ok(v)) = stream.next() {
            if v.is_object() {
                return Some(v);
            }
        }
    }
    // Single-quoted pseudo-JSON: repair only when the block has no double
    // quotes, so apostrophes inside proper strings are never touched.
    for (pos, _) in raw.match_indices('{') {
        if let Some(block) = balanced_block(&raw[pos..]) {
            if !block.contains('"') && block.contains('\'') {
                let repaired = block.replace('\'', "\"");
                if let Ok(v) = serde_json::from_str::<Value>(&repaired) {
                    if v.is_object() {
                        return Some(v);
                    }
                }
            }
        }
    }
    None
}

fn balanced_block(s: &str) -> Option<&str> {
    let mut depth = 0usize;
    for (i, c) in s.char_indices() {
        match c {
            '{' => depth += 1,
            '}' => {
                depth = depth.checked_sub(1)?;
                if depth == 0 {
                    return Some(&s[..=i]);
                }
            }
            _ => {}
        }
    }
    None
}

fn clean_terms(items: Vec<(String, Option<String>)>, k: usize) -> (Vec<String>, Vec<String>) {
    let mut terms = Vec::new();
    let mut examples = Vec::new();
    for (t, ex) in items {
        let t = t.trim().to_lowercase();
        if t.is_empty() || terms.contains(&t) {
            continue;
        }
        if terms.len() == k {
            break;
        }
        terms.push(t);
        if let Some(ex) = ex {
            examples.push(ex.trim().to_lowercase());
        }
    }
    (terms, examples)
}

/// Extract a candidate list from a raw model response.
///
/// bp1/bp2 read `terms` as a flat string list; rp reads it as a list of
/// `{term, example}` objects (bare strings tolerated). Candidates are
/// lowercased, trimmed, deduped in order, and truncated to `k`.
pub fn parse_candidates(
    raw: &str,
    variant: PromptVariant,
    k: usize,
    definition: &str,
) -> Result<CandidateSet> {
    if k == 0 {
        return Err(Error::Prompt("candidate count k must be >= 1".into()));
    }
    if raw.trim().is_empty() {
        return Err(Error::ParseFailure("empty response".into()));
    }
    let obj = first_json_object(raw)
        .ok_or_else(|| Error::ParseFailure("no JSON object found in response".into()))?;
    let list = obj
        .get("terms")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::ParseFailure("response JSON has no `terms` list".into()))?;
    if list.is_empty() {
        return Err(Error::ParseFailure("`terms` list is empty".into()));
    }

    let mut items: Vec<(String, Option<String>)> = Vec::new();
    for v in list {
        match (variant, v) {
            (PromptVariant::Rp, Value::Object(o)) => {
                if let Some(term) = o.get("term").and_then(Value::as_str) {
                    let ex = o.get("example").and_then(Value::as_str).map(String::from);
                    items.push((term.to_string(), ex));
                }
            }
            (_, Value::String(s)) => items.push((s.clone(), None)),
            _ => {}
        }
    }
    let (candidates, examples) = clean_terms(items, k);
    if candidates.is_empty() {
        return Err(Error::ParseFailure(
            "`terms` list held no usable entries".into(),
        ));
    }
    Ok(CandidateSet {
        definition: definition.to_string(),
        candidates,
        raw_response: raw.to_string(),
        variant,
        examples: match variant {
            PromptVariant::Rp if !examples.is_empty() => Some(examples),
            _ => None,
        },
        degraded: false,
    })
}

/// Best-effort recovery after repeated parse failures: each non-empty line
/// of the response becomes a candidate. The result is flagged degraded.
pub fn fallback_candidates(
    raw: &str,
    variant: PromptVariant,
    k: usize,
    definition: &str,
) -> Result<CandidateSet> {
    let items: Vec<(String, Option<String>)> = raw
        .lines()
        .map(|l| l.trim().trim_start_matches(['-', '*', ' ']).trim())
        .filter(|l| !l.is_empty() && !l.contains('{') && !l.contains('}'))
        .map(|l| (l.trim_matches(['"', '\'', ',']).to_string(), None))
        .collect();
    let (candidates, _) = clean_terms(items, k);
    if candidates.is_empty() {
        return Err(Error::ParseFailure(
            "fallback found no usable lines".into(),
        ));
    }
    Ok(CandidateSet {
        definition: definition.to_string(),
        candidates,
        raw_response: raw.to_string(),
        variant,
        examples: None,
        degraded: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::aggregate_rd;

    fn spec(variant: PromptVariant) -> PromptSpec {
        let fewshot = if variant.wants_examples() {
            vec![
                ("alert and fully informed".to_string(), "knowing".to_string()),
                ("in the middle of the week".to_string(), "midweek".to_string()),
            ]
        } else {
            Vec::new()
        };
        PromptSpec {
            variant,
            k: 5,
            dictionary_name: "WordNet".to_string(),
            dictionary_description: "a lexical database of English".to_string(),
            fewshot,
        }
    }

    #[test]
    fn bp1_renders_count_and_json_shape() {
        let text = render_prompt(&spec(PromptVariant::Bp1), "a piece of furniture for sitting")
            .unwrap();
        assert!(text.contains("generate a list of 5 terms"));
        assert!(text.contains("{ \"terms\": [\"term_1\", \"term_2\", ... ] }"));
        assert!(text.contains("Only give me a list back"));
    }

    #[test]
    fn bp2_renders_exemplar_block() {
        let text = render_prompt(&spec(PromptVariant::Bp2), "q").unwrap();
        assert!(text.contains("These are some examples of definitions and terms in this dictionary:"));
        assert!(text.contains("definition: \"alert and fully informed\" -> term: \"knowing\""));
        assert!(text.contains("definition: \"in the middle of the week\" -> term: \"midweek\""));
    }

    #[test]
    fn rp_requests_usage_sentences() {
        let text = render_prompt(&spec(PromptVariant::Rp), "q").unwrap();
        assert!(text.contains("provide an example usage in a sentence"));
    }

    #[test]
    fn definition_appears_exactly_once() {
        let needle = "an uncommon marker definition xyzq";
        for variant in [PromptVariant::Bp1, PromptVariant::Bp2, PromptVariant::Rp] {
            let text = render_prompt(&spec(variant), needle).unwrap();
            assert_eq!(text.matches(needle).count(), 1, "{variant}");
        }
    }

    #[test]
    fn substituted_values_are_not_rescanned() {
        let text = render_prompt(&spec(PromptVariant::Bp1), "definition with {k} inside").unwrap();
        assert!(text.contains("definition with {k} inside"));
    }

    #[test]
    fn missing_description_is_an_error() {
        let mut s = spec(PromptVariant::Bp1);
        s.dictionary_description = "  ".into();
        assert!(render_prompt(&s, "q").is_err());
    }

    #[test]
    fn empty_fewshot_for_bp2_is_an_error() {
        let mut s = spec(PromptVariant::Bp2);
        s.fewshot.clear();
        assert!(render_prompt(&s, "q").is_err());
    }

    #[test]
    fn sample_fewshot_excludes_and_is_deterministic() {
        let pairs: Vec<_> = (0..100)
            .map(|i| ("t".to_string(), format!("d{i}"), "s".to_string()))
            .collect();
        let corpus = aggregate_rd("t", &pairs).unwrap();
        let a = sample_fewshot(&corpus, 5, 3, "q").unwrap();
        let b = sample_fewshot(&corpus, 5, 3, "q").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 5);

        // Membership scan over a seed sweep: the excluded definition never
        // appears.
        for seed in 0..1000 {
            let sample = sample_fewshot(&corpus, 5, seed, "d17").unwrap();
            assert!(sample.iter().all(|(d, _)| d != "d17"), "seed {seed}");
        }
    }

    #[test]
    fn sample_fewshot_too_small_errors() {
        let pairs: Vec<_> = (0..3)
            .map(|i| ("t".to_string(), format!("d{i}"), "s".to_string()))
            .collect();
        let corpus = aggregate_rd("t", &pairs).unwrap();
        assert!(sample_fewshot(&corpus, 3, 0, "d0").is_err());
        assert!(sample_fewshot(&corpus, 3, 0, "unrelated").is_ok());
    }

    #[test]
    fn parse_clean_list() {
        let cs = parse_candidates(
            r#"{"terms": ["chair","stool","bench","sofa","couch"]}"#,
            PromptVariant::Bp1,
            5,
            "d",
        )
        .unwrap();
        assert_eq!(cs.candidates, vec!["chair", "stool", "bench", "sofa", "couch"]);
        assert!(!cs.degraded);
    }

    #[test]
    fn parse_rp_objects_with_examples() {
        let raw = r#"{"terms": [{"term": "chair", "example": "he sat on the chair and opened his book."}, {"term": "stool", "example": "she perched on the stool at the bar."}]}"#;
        let cs = parse_candidates(raw, PromptVariant::Rp, 5, "d").unwrap();
        assert_eq!(cs.candidates, vec!["chair", "stool"]);
        assert_eq!(
            cs.examples.as_deref().unwrap()[0],
            "he sat on the chair and opened his book."
        );
    }

    #[test]
    fn parse_strips_fences_prose_case_and_duplicates() {
        let raw = "Sure! ```json {\"terms\":[\"Chair\",\"chair\",\"stool\"]}``` hope that helps";
        let cs = parse_candidates(raw, PromptVariant::Bp2, 5, "d").unwrap();
        assert_eq!(cs.candidates, vec!["chair", "stool"]);
    }

    #[test]
    fn parse_truncates_to_k() {
        let raw = r#"{"terms": ["a","b","c","d","e","f","g"]}"#;
        let cs = parse_candidates(raw, PromptVariant::Bp1, 3, "d").unwrap();
        assert_eq!(cs.candidates, vec!["a", "b", "c"]);
    }

    #[test]
    fn parse_single_quoted_variant() {
        let raw = "{'terms': ['chair', 'stool']}";
        let cs = parse_candidates(raw, PromptVariant::Bp1, 5, "d").unwrap();
        assert_eq!(cs.candidates, vec!["chair", "stool"]);
    }

    #[test]
    fn parse_failures() {
        assert!(matches!(
            parse_candidates("no json here", PromptVariant::Bp1, 5, "d"),
            Err(Error::ParseFailure(_))
        ));
        assert!(matches!(
            parse_candidates(r#"{"words": ["x"]}"#, PromptVariant::Bp1, 5, "d"),
            Err(Error::ParseFailure(_))
        ));
        assert!(matches!(
            parse_candidates(r#"{"terms": []}"#, PromptVariant::Bp1, 5, "d"),
            Err(Error::ParseFailure(_))
        ));
    }

    #[test]
    fn parse_is_idempotent_on_clean_lists() {
        let cs = parse_candidates(
            r#"{"terms": ["chair","stool"]}"#,
            PromptVariant::Bp1,
            5,
            "d",
        )
        .unwrap();
        let rendered = format!(
            "{{\"terms\": [{}]}}",
            cs.candidates
                .iter()
                .map(|c| format!("\"{c}\""))
                .collect::<Vec<_>>()
                .join(",")
        );
        let again = parse_candidates(&rendered, PromptVariant::Bp1, 5, "d").unwrap();
        assert_eq!(again.candidates, cs.candidates);
    }

    #[test]
    fn fallback_reads_lines_and_flags_degraded() {
        let cs = fallback_candidates("- Chair\n- stool\n\n", PromptVariant::Bp1, 5, "d").unwrap();
        assert_eq!(cs.candidates, vec!["chair", "stool"]);
        assert!(cs.degraded);
    }
}

#[cfg(test)]
mod properties {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]

        #[test]
        fn parsed_candidates_come_from_the_raw_text(
            terms in prop::collection::vec("[ A-Za-z0-9]{1,12}", 1..10),
            k in 1usize..8,
        ) {
            let raw = serde_json::json!({ "terms": terms }).to_string();
            if let Ok(cs) = parse_candidates(&raw, PromptVariant::Bp1, k, "d") {
                let hay = raw.to_lowercase();
                prop_assert!(cs.candidates.len() <= k);
                for c in &cs.candidates {
                    prop_assert!(hay.contains(c.as_str()), "{c:?} not in {hay:?}");
                }
                // No duplicates survive.
                let mut sorted = cs.candidates.clone();
                sorted.sort();
                sorted.dedup();
                prop_assert_eq!(sorted.len(), cs.candidates.len());
            }
        }
    }
}
