//! Aggregate report and its canonical JSON form.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::retrieve::StrategyConfig;

/// Denominators and failure tallies behind one metric row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MetricCounts {
    pub cases: usize,
    pub retrieval_failures: usize,
    pub relevancy_failures: usize,
    pub reranker_failures: usize,
    pub answer_failures: usize,
    pub answer_relevancy_failures: usize,
    pub faithfulness_failures: usize,
    pub adherence_failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub strategy: String,
    pub k: usize,
    pub exact_recovery_rate: f64,
    pub relevancy_rate: f64,
    pub avg_reranker_score: f64,
    pub declined_rate: f64,
    pub faithfulness_rate: f64,
    pub relevancy_answer_rate: f64,
    /// Mean adherence score.
    pub accuracy_rate: f64,
    pub counts: MetricCounts,
}

impl MetricRow {
    pub const METRICS: [&'static str; 7] = [
        "exact_recovery_rate",
        "relevancy_rate",
        "avg_reranker_score",
        "declined_rate",
        "faithfulness_rate",
        "relevancy_answer_rate",
        "accuracy_rate",
    ];

    pub fn metric_values(&self) -> [f64; 7] {
        [
            self.exact_recovery_rate,
            self.relevancy_rate,
            self.avg_reranker_score,
            self.declined_rate,
            self.faithfulness_rate,
            self.relevancy_answer_rate,
            self.accuracy_rate,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportConfig {
    pub strategies: Vec<StrategyConfig>,
    pub ks: Vec<usize>,
    pub seed: u64,
    pub cases: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub rows: Vec<MetricRow>,
    pub config: ReportConfig,
}

impl EvaluationReport {
    pub fn row(&self, strategy: &str, k: usize) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.strategy == strategy && r.k == k)
    }

    /// Sorted keys, two-space indent, every float at four decimals.
    pub fn to_canonical_json(&self) -> String {
        let value = serde_json::to_value(self).expect("report serializes");
        let mut out = String::new();
        write_value(&mut out, &value, 0);
        out.push('\n');
        out
    }

    /// One line per (strategy, k) with a column per metric.
    pub fn table(&self) -> String {
        let width = self.rows.iter().map(|r| r.strategy.len()).max().unwrap_or(0).max(8);
        let mut out = format!("{:<width$} {:>3}", "strategy", "k");
        for m in MetricRow::METRICS {
            let _ = write!(out, " {:>10}", short_name(m));
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "{:<width$} {:>3}", r.strategy, r.k);
            for v in r.metric_values() {
                let _ = write!(out, " {v:>10.4}");
            }
            out.push('\n');
        }
        out
    }
}

fn short_name(metric: &str) -> &'static str {
    match metric {
        "exact_recovery_rate" => "recovery",
        "relevancy_rate" => "relevancy",
        "avg_reranker_score" => "reranker",
        "declined_rate" => "declined",
        "faithfulness_rate" => "faithful",
        "relevancy_answer_rate" => "ans_relev",
        _ => "accuracy",
    }
}

fn write_value(out: &mut String, value: &Value, depth: usize) {
    let pad = |out: &mut String, d: usize| out.push_str(&"  ".repeat(d));
    match value {
        Value::Number(n) if n.is_f64() => match n.as_f64() {
            Some(f) if f.is_finite() => {
                // avoid "-0.0000"
                let s = format!("{f:.4}");
                out.push_str(if s == "-0.0000" { "0.0000" } else { &s });
            }
            _ => out.push_str("null"),
        },
        Value::Array(items) if items.is_empty() => out.push_str("[]"),
        Value::Array(items) => {
            out.push_str("[\n");
            for (i, item) in items.iter().enumerate() {
                pad(out, depth + 1);
                write_value(out, item, depth + 1);
                out.push_str(if i + 1 < items.len() { ",\n" } else { "\n" });
            }
            pad(out, depth);
            out.push(']');
        }
        Value::Object(map) if map.is_empty() => out.push_str("{}"),
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push_str("{\n");
            for (i, key) in keys.iter().enumerate() {
                pad(out, depth + 1);
                out.push_str(&Value::String((*key).clone()).to_string());
                out.push_str(": ");
                write_value(out, &map[*key], depth + 1);
                out.push_str(if i + 1 < keys.len() { ",\n" } else { "\n" });
            }
            pad(out, depth);
            out.push('}');
        }
        other => out.push_str(&other.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::retrieve::Strategy;

    fn report() -> EvaluationReport {
        EvaluationReport {
            rows: vec![MetricRow {
                strategy: "naive".into(),
                k: 1,
                exact_recovery_rate: 0.5,
                relevancy_rate: 2.0 / 3.0,
                avg_reranker_score: -1.23456,
                declined_rate: 0.0,
                faithfulness_rate: 1.0,
                relevancy_answer_rate: -0.0,
                accuracy_rate: 0.25,
                counts: MetricCounts {
                    cases: 4,
                    ..Default::default()
                },
            }],
            config: ReportConfig {
                strategies: vec![StrategyConfig::new(Strategy::Naive)],
                ks: vec![1],
                seed: 3,
                cases: 4,
            },
        }
    }

    #[test]
    fn canonical_json_format() {
        let json = report().to_canonical_json();
        assert!(json.contains("\"exact_recovery_rate\": 0.5000"));
        assert!(json.contains("\"relevancy_rate\": 0.6667"));
        assert!(json.contains("\"avg_reranker_score\": -1.2346"));
        assert!(json.contains("\"relevancy_answer_rate\": 0.0000"));
        assert!(json.contains("\"cases\": 4"));
        assert!(json.contains("\"seed\": 3"));
        let a = json.find("\"accuracy_rate\"").unwrap();
        let b = json.find("\"avg_reranker_score\"").unwrap();
        assert!(a < b, "keys are sorted");
        let parsed: Value = serde_json::from_str(&json).unwrap();
        assert_eq!(parsed["rows"][0]["k"], 1);
    }

    #[test]
    fn table_has_a_line_per_row() {
        let t = report().table();
        assert_eq!(t.lines().count(), 2);
        assert!(t.lines().nth(1).unwrap().starts_with("naive"));
        assert!(t.contains("0.5000"));
    }
}
