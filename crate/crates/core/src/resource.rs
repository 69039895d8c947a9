//! Per-call resource accounting and per-(model, mode) aggregation.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::generate::Generation;
use crate::rag::{Mode, RagRecord};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenSource {
    ServerReported,
    WhitespaceFallback,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResourceMetrics {
    pub execution_time_s: f64,
    pub tokens: u64,
    pub response_bytes: u64,
    pub token_source: TokenSource,
}

impl ResourceMetrics {
    pub fn from_answer(answer: &str, usage_tokens: Option<u64>, elapsed: Duration) -> Self {
        let (tokens, token_source) = match usage_tokens {
            Some(t) => (t, TokenSource::ServerReported),
            None => (whitespace_tokens(answer), TokenSource::WhitespaceFallback),
        };
        ResourceMetrics {
            execution_time_s: elapsed.as_secs_f64(),
            tokens,
            response_bytes: answer.len() as u64,
            token_source,
        }
    }
}

pub fn whitespace_tokens(text: &str) -> u64 {
    text.split_whitespace().count() as u64
}

/// Times exactly one generation call.
///
/// A failed call still yields metrics (zero tokens and bytes, elapsed time
/// until the failure); flagging the failure is the caller's job.
pub fn measure<F>(call: F) -> (Result<Generation>, ResourceMetrics)
where
    F: FnOnce() -> Result<Generation>,
{
    let started = Instant::now();
    let outcome = call();
    let elapsed = started.elapsed();
    let metrics = match &outcome {
        Ok(g) => ResourceMetrics::from_answer(&g.text, g.usage_tokens, elapsed),
        Err(_) => ResourceMetrics::from_answer("", Some(0), elapsed),
    };
    (outcome, metrics)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceBreakdown {
    pub server_reported: usize,
    pub whitespace_fallback: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupAggregate {
    pub model: String,
    pub mode: Mode,
    /// Successful records the means are taken over.
    pub runs: usize,
    pub failed: usize,
    pub execution_time_s: f64,
    pub tokens: f64,
    pub response_bytes: f64,
    pub token_sources: SourceBreakdown,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ResourceTable {
    pub groups: Vec<GroupAggregate>,
    pub warnings: Vec<String>,
}

/// Means per (model, mode) over successful records, groups in order of
/// first appearance. Groups without a successful record are omitted with a
/// warning.
pub fn aggregate<T: Real>(records: &[RagRecord<T>]) -> ResourceTable {
    let mut keys: Vec<(String, Mode)> = Vec::new();
    for r in records {
        let key = (r.model.clone(), r.request.mode);
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    let mut table = ResourceTable::default();
    for (model, mode) in keys {
        let group: Vec<&RagRecord<T>> = records
            .iter()
            .filter(|r| r.model == model && r.request.mode == mode)
            .collect();
        let ok: Vec<&ResourceMetrics> = group
            .iter()
            .filter(|r| r.error.is_none())
            .map(|r| &r.metrics)
            .collect();
        let failed = group.len() - ok.len();
        if ok.is_empty() {
            table.warnings.push(format!(
                "{model} ({}) has no successful records; omitted",
                mode.label()
            ));
            continue;
        }
        let n = ok.len() as f64;
        let mut sources = SourceBreakdown::default();
        for m in &ok {
            match m.token_source {
                TokenSource::ServerReported => sources.server_reported += 1,
                TokenSource::WhitespaceFallback => sources.whitespace_fallback += 1,
            }
        }
        table.groups.push(GroupAggregate {
            model,
            mode,
            runs: ok.len(),
            failed,
            execution_time_s: ok.iter().map(|m| m.execution_time_s).sum::<f64>() / n,
            tokens: ok.iter().map(|m| m.tokens as f64).sum::<f64>() / n,
            response_bytes: ok.iter().map(|m| m.response_bytes as f64).sum::<f64>() / n,
            token_sources: sources,
        });
    }
    for w in &table.warnings {
        log::warn!("{w}");
    }
    table
}

pub const TABLE_ROWS: [&str; 5] = [
    "Execution Time (s)",
    "Memory Usage (MB)",
    "GPU Utilization (%)",
    "Avg. number of tokens",
    "Avg. Response size (bytes)",
];

impl ResourceTable {
    /// Aligned text table, one column per (model, mode). Memory and GPU rows
    /// are not measured and print as `n/a`.
    pub fn render(&self) -> String {
        let mut header = vec!["Metric".to_owned()];
        header.extend(
            self.groups
                .iter()
                .map(|g| format!("{} ({})", g.model, g.mode.label())),
        );
        let mut rows = vec![header];
        for (i, name) in TABLE_ROWS.iter().enumerate() {
            let mut row = vec![(*name).to_owned()];
            row.extend(self.groups.iter().map(|g| match i {
                0 => format!("{:.4}", g.execution_time_s),
                3 => format!("{:.4}", g.tokens),
                4 => format!("{:.4}", g.response_bytes),
                _ => "n/a".to_owned(),
            }));
            rows.push(row);
        }
        let widths: Vec<usize> = (0..rows[0].len())
            .map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for row in &rows {
            let line: Vec<String> = row
                .iter()
                .enumerate()
                .map(|(c, cell)| {
                    if c == 0 {
                        format!("{cell:<w$}", w = widths[c])
                    } else {
                        format!("{cell:>w$}", w = widths[c])
                    }
                })
                .collect();
            let _ = writeln!(out, "{}", line.join("  ").trim_end());
        }
        out
    }

    pub fn to_json(&self) -> serde_json::Value {
        let groups: Vec<serde_json::Value> = self
            .groups
            .iter()
            .map(|g| {
                serde_json::json!({
                    "model": g.model,
                    "mode": g.mode,
                    "runs": g.runs,
                    "failed": g.failed,
                    "execution_time_s": g.execution_time_s,
                    "memory_mb": "n/a",
                    "gpu_utilization_pct": "n/a",
                    "tokens": g.tokens,
                    "response_bytes": g.response_bytes,
                    "token_sources": g.token_sources,
                })
            })
            .collect();
        serde_json::json!({ "groups": groups, "warnings": self.warnings })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::rag::QueryRequest;

    fn record(
        model: &str,
        mode: Mode,
        time: f64,
        tokens: u64,
        source: TokenSource,
    ) -> RagRecord<f64> {
        RagRecord {
            id: None,
            model: model.into(),
            request: QueryRequest::new("q", mode),
            retrieved: vec![],
            prompt: String::new(),
            answer: String::new(),
            metrics: ResourceMetrics {
                execution_time_s: time,
                tokens,
                response_bytes: tokens * 5,
                token_source: source,
            },
            error: None,
        }
    }

    #[test]
    fn fallback_counting() {
        let m = ResourceMetrics::from_answer("hello world", None, Duration::from_millis(5));
        assert_eq!((m.tokens, m.response_bytes), (2, 11));
        assert_eq!(m.token_source, TokenSource::WhitespaceFallback);
        let m = ResourceMetrics::from_answer("", Some(0), Duration::ZERO);
        assert_eq!((m.tokens, m.response_bytes), (0, 0));
        assert_eq!(m.token_source, TokenSource::ServerReported);
        assert_eq!(
            ResourceMetrics::from_answer("héllo", None, Duration::ZERO).response_bytes,
            6
        );
    }

    #[test]
    fn measure_flags_nothing_but_times_failures() {
        let (out, m) = measure(|| {
            Err(Error::Transport {
                attempts: 1,
                message: "down".into(),
            })
        });
        assert!(out.is_err());
        assert!(m.execution_time_s >= 0.0);
        assert_eq!(m.tokens, 0);
    }

    #[test]
    fn aggregate_means_and_breakdown() {
        let s = TokenSource::ServerReported;
        let f = TokenSource::WhitespaceFallback;
        let records = vec![
            record("m", Mode::Nc, 1.0, 10, s),
            record("m", Mode::Nc, 3.0, 20, f),
            record("m", Mode::Wc, 0.5, 4, f),
        ];
        let t = aggregate(&records);
        assert_eq!(t.groups.len(), 2);
        let nc = &t.groups[0];
        assert_eq!(nc.execution_time_s, 2.0);
        assert_eq!(nc.tokens, 15.0);
        assert_eq!(
            nc.token_sources,
            SourceBreakdown {
                server_reported: 1,
                whitespace_fallback: 1
            }
        );
        let wc = &t.groups[1];
        assert_eq!(
            (wc.execution_time_s, wc.tokens, wc.response_bytes),
            (0.5, 4.0, 20.0)
        );
    }

    #[test]
    fn all_failed_group_is_omitted() {
        let mut r = record("m", Mode::Wc, 1.0, 1, TokenSource::ServerReported);
        r.error = Some("boom".into());
        let t = aggregate(&[r]);
        assert!(t.groups.is_empty());
        assert_eq!(t.warnings.len(), 1);
    }

    #[test]
    fn render_has_table_rows() {
        let t = aggregate(&[record(
            "gemma2",
            Mode::Nc,
            3.8876,
            4,
            TokenSource::ServerReported,
        )]);
        let text = t.render();
        for row in TABLE_ROWS {
            assert!(text.contains(row));
        }
        assert!(text.contains("gemma2 (NC)"));
        assert!(text.contains("3.8876"));
        assert_eq!(t.to_json()["groups"][0]["memory_mb"], "n/a");
    }
}
