//! Report emission: a line-delimited machine-readable file, an aligned
//! plain-text table, and the per-query trace.
//!
//! Both renderings are deterministic: map keys are ordered and floats use
//! the shortest round-trip form, so identical runs produce identical bytes.

use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::eval::{EvalReport, MetricBlock, QueryResult};

fn tagged(kind: &str, scope: Option<&str>, value: Value) -> Result<String> {
    let mut obj = match value {
        Value::Object(o) => o,
        other => {
            let mut m = serde_json::Map::new();
            m.insert("value".into(), other);
            m
        }
    };
    obj.insert("kind".into(), json!(kind));
    if let Some(scope) = scope {
        obj.insert("scope".into(), json!(scope));
    }
    serde_json::to_string(&Value::Object(obj)).map_err(|e| Error::InvalidConfig(e.to_string()))
}

fn to_value<T: serde::Serialize>(v: &T) -> Result<Value> {
    serde_json::to_value(v).map_err(|e| Error::InvalidConfig(e.to_string()))
}

/// Serialize a report as one JSON object per line: config, counts, one
/// metrics line per scope, then provenance.
pub fn report_to_jsonl(report: &EvalReport) -> Result<String> {
    let mut lines = Vec::new();
    lines.push(tagged("config", None, to_value(&report.config)?)?);
    lines.push(tagged("counts", None, to_value(&report.counts)?)?);
    lines.push(tagged(
        "metrics",
        Some("aggregate"),
        to_value(&report.aggregate)?,
    )?);
    for (source, block) in &report.per_source {
        lines.push(tagged(
            "metrics",
            Some(&format!("source:{source}")),
            to_value(block)?,
        )?);
    }
    lines.push(tagged("provenance", None, to_value(&report.provenance)?)?);
    Ok(lines.join("\n") + "\n")
}

fn parse_line<T: serde::de::DeserializeOwned>(v: &Value, line: usize) -> Result<T> {
    serde_json::from_value(v.clone())
        .map_err(|e| Error::CorruptCache(format!("report line {line}: {e}")))
}

/// Rebuild a report from its line-delimited form.
pub fn report_from_jsonl(text: &str) -> Result<EvalReport> {
    let mut config = None;
    let mut counts = None;
    let mut aggregate = None;
    let mut per_source = std::collections::BTreeMap::new();
    let mut provenance = None;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v: Value = serde_json::from_str(line)
            .map_err(|e| Error::CorruptCache(format!("report line {}: {e}", i + 1)))?;
        let kind = v.get("kind").and_then(Value::as_str).unwrap_or_default();
        match kind {
            "config" => config = Some(parse_line(&v, i + 1)?),
            "counts" => counts = Some(parse_line(&v, i + 1)?),
            "provenance" => provenance = Some(parse_line(&v, i + 1)?),
            "metrics" => {
                let scope = v.get("scope").and_then(Value::as_str).unwrap_or_default();
                let block: MetricBlock = parse_line(&v, i + 1)?;
                if scope == "aggregate" {
                    aggregate = Some(block);
                } else if let Some(source) = scope.strip_prefix("source:") {
                    per_source.insert(source.to_string(), block);
                }
            }
            other => {
                return Err(Error::CorruptCache(format!(
                    "report line {}: unknown kind {other:?}",
                    i + 1
                )))
            }
        }
    }
    Ok(EvalReport {
        config: config.ok_or_else(|| Error::CorruptCache("report missing config".into()))?,
        counts: counts.ok_or_else(|| Error::CorruptCache("report missing counts".into()))?,
        aggregate: aggregate
            .ok_or_else(|| Error::CorruptCache("report missing aggregate metrics".into()))?,
        per_source,
        provenance: provenance.unwrap_or_default(),
    })
}

/// One JSON object per evaluated query, in evaluation order.
pub fn trace_to_jsonl(results: &[QueryResult]) -> Result<String> {
    let mut out = String::new();
    for r in results {
        out.push_str(
            &serde_json::to_string(r).map_err(|e| Error::InvalidConfig(e.to_string()))?,
        );
        out.push('\n');
    }
    Ok(out)
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{v:.4}"),
        None => "-".to_string(),
    }
}

fn block_cells(block: &MetricBlock, p_ks: &[usize], acc_ks: &[usize]) -> Vec<String> {
    let mut cells = vec![block.queries.to_string(), fmt_opt(block.mrr)];
    for k in p_ks {
        cells.push(fmt_opt(block.p_at.get(k).copied()));
    }
    for k in acc_ks {
        cells.push(fmt_opt(block.acc_at.get(k).copied()));
    }
    cells.push(fmt_opt(block.median_rank));
    cells.push(fmt_opt(block.rank_std));
    cells
}

/// Render the aligned plain-text table: one aggregate row plus one row per
/// source.
pub fn render_table(report: &EvalReport) -> String {
    let cfg = &report.config;
    let mut out = String::new();
    out.push_str(&format!(
        "mode={} prompt={} pooling={} m={} embed={} instruction={}\n",
        cfg.mode,
        cfg.prompt_variant
            .map(|v| v.to_string())
            .unwrap_or_else(|| "-".into()),
        cfg.pooling,
        cfg.candidates_m,
        cfg.embedding_model.as_deref().unwrap_or("-"),
        cfg.instruction_variant.as_deref().unwrap_or("-"),
    ));
    out.push_str(&format!(
        "queries={} missing_gold={} degraded={} failed={}\n\n",
        report.counts.queries,
        report.counts.missing_gold,
        report.counts.degraded,
        report.counts.failed
    ));

    let mut header = vec!["scope".to_string(), "n".to_string(), "MRR".to_string()];
    for k in &cfg.p_k_list {
        header.push(format!("P@{k}"));
    }
    for k in &cfg.acc_k_list {
        header.push(format!("acc@{k}"));
    }
    header.push("mr".to_string());
    header.push("rank_std".to_string());

    let mut rows: Vec<Vec<String>> = Vec::new();
    let mut agg = vec!["aggregate".to_string()];
    agg.extend(block_cells(&report.aggregate, &cfg.p_k_list, &cfg.acc_k_list));
    rows.push(agg);
    for (source, block) in &report.per_source {
        let mut row = vec![source.clone()];
        row.extend(block_cells(block, &cfg.p_k_list, &cfg.acc_k_list));
        rows.push(row);
    }

    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in &rows {
        for (i, cell) in row.iter().enumerate() {
            widths[i] = widths[i].max(cell.len());
        }
    }
    let render_row = |cells: &[String]| -> String {
        cells
            .iter()
            .enumerate()
            .map(|(i, c)| format!("{c:<width$}", width = widths[i]))
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    out.push_str(&render_row(&header));
    out.push('\n');
    for row in &rows {
        out.push_str(&render_row(row));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{ConfigDescriptor, EvalCounts, EvalMode, Provenance};
    use crate::index::Pooling;
    use std::collections::BTreeMap;

    fn sample_report() -> EvalReport {
        let block = MetricBlock {
            queries: 4,
            mrr: Some(0.75),
            p_at: BTreeMap::from([(1, 0.5), (5, 0.2)]),
            acc_at: BTreeMap::from([(1, 0.5), (10, 1.0)]),
            median_rank: Some(0.5),
            rank_std: Some(1.25),
        };
        EvalReport {
            config: ConfigDescriptor {
                mode: EvalMode::Gear,
                prompt_variant: Some(crate::prompt::PromptVariant::Bp2),
                pooling: Pooling::Mean,
                candidates_m: 5,
                generation_model: Some("mock-chat".into()),
                embedding_model: Some("mock-embed-64".into()),
                instruction_variant: Some("none".into()),
                p_k_list: vec![1, 5],
                acc_k_list: vec![1, 10],
                top_k: 10,
            },
            counts: EvalCounts {
                queries: 4,
                missing_gold: 0,
                degraded: 0,
                failed: 0,
            },
            aggregate: block.clone(),
            per_source: BTreeMap::from([("WN".to_string(), block)]),
            provenance: Provenance::default(),
        }
    }

    #[test]
    fn jsonl_is_line_delimited_and_deterministic() {
        let report = sample_report();
        let a = report_to_jsonl(&report).unwrap();
        let b = report_to_jsonl(&report).unwrap();
        assert_eq!(a, b);
        let lines: Vec<&str> = a.lines().collect();
        assert_eq!(lines.len(), 5);
        for line in &lines {
            let v: Value = serde_json::from_str(line).unwrap();
            assert!(v.get("kind").is_some());
        }
        assert!(lines[2].contains("\"scope\":\"aggregate\""));
        assert!(lines[3].contains("\"scope\":\"source:WN\""));
    }

    #[test]
    fn table_has_header_and_rows() {
        let table = render_table(&sample_report());
        assert!(table.contains("MRR"));
        assert!(table.contains("aggregate"));
        assert!(table.contains("WN"));
        assert!(table.contains("0.7500"));
    }

    #[test]
    fn jsonl_round_trips() {
        let report = sample_report();
        let text = report_to_jsonl(&report).unwrap();
        let back = report_from_jsonl(&text).unwrap();
        assert_eq!(back.config, report.config);
        assert_eq!(back.counts, report.counts);
        assert_eq!(back.aggregate, report.aggregate);
        assert_eq!(back.per_source, report.per_source);
        assert_eq!(report_to_jsonl(&back).unwrap(), text);
    }
}
