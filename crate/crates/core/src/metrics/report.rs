use serde::{Deserialize, Serialize};

use super::{bert_score, bleu, meteor, rouge_l, rouge_n, MetricScore, TokenSeq, DEFAULT_MAX_N};
use crate::embed::Embedder;
use crate::error::{Error, Result};
use crate::rag::{BenchmarkRow, Mode};
use crate::scalar::{mean, Real};

/// Every metric for one (answer, reference) pair, on the `[0, 1]` scale
/// except `bleu` and `meteor` which are percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairScores<T> {
    pub bert: MetricScore<T>,
    pub rouge1: MetricScore<T>,
    /// `None` when the reference has a single token.
    pub rouge2: Option<MetricScore<T>>,
    pub rouge_l: MetricScore<T>,
    pub bleu: T,
    pub meteor: T,
}

fn zero<T: Real>(name: &str) -> MetricScore<T> {
    MetricScore::from_pr(name, T::zero(), T::zero())
}

/// Scores one answer. An answer with no tokens scores 0 everywhere.
pub fn score_pair<T: Real>(
    answer: &str,
    reference: &str,
    embedder: &dyn Embedder<T>,
) -> Result<PairScores<T>> {
    let cand = TokenSeq::tokenize(answer);
    let refs = TokenSeq::tokenize(reference);
    if refs.is_empty() {
        return Err(Error::Precondition("reference has no tokens".into()));
    }
    let rouge2 = match rouge_n(&cand, &refs, 2) {
        Ok(m) => Some(m),
        Err(Error::Undefined(_)) => None,
        Err(e) => return Err(e),
    };
    if cand.is_empty() {
        return Ok(PairScores {
            bert: zero("bert"),
            rouge1: zero("rouge1"),
            rouge2: rouge2.map(|_| zero("rouge2")),
            rouge_l: zero("rougeL"),
            bleu: T::zero(),
            meteor: T::zero(),
        });
    }
    Ok(PairScores {
        bert: bert_score(&cand, &refs, embedder)?,
        rouge1: rouge_n(&cand, &refs, 1)?,
        rouge2,
        rouge_l: rouge_l(&cand, &refs)?,
        bleu: bleu(&cand, std::slice::from_ref(&refs), DEFAULT_MAX_N)?.score,
        meteor: meteor(&cand, &refs)?,
    })
}

/// Precision / recall / F1 triple on the percent scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf<T> {
    pub p: T,
    pub r: T,
    pub f: T,
}

impl<T: Real> Prf<T> {
    fn mean_of<'a>(scores: impl Iterator<Item = &'a MetricScore<T>>) -> Prf<T> {
        let (mut p, mut r, mut f) = (Vec::new(), Vec::new(), Vec::new());
        for s in scores {
            p.push(s.precision.unwrap_or(s.f1));
            r.push(s.recall.unwrap_or(s.f1));
            f.push(s.f1);
        }
        let pct = |v: &[T]| mean(v).unwrap_or_else(T::zero) * T::hundred();
        Prf {
            p: pct(&p),
            r: pct(&r),
            f: pct(&f),
        }
    }
}

/// Sentence-level means for one (model, mode, use case) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport<T> {
    pub model: String,
    pub mode: Mode,
    pub use_case: String,
    /// Pairs in the group, including failures.
    pub pairs: usize,
    /// Pairs whose generation failed; excluded from the means.
    pub failed: usize,
    /// Pairs contributing to `rouge2` (references of at least two tokens).
    pub rouge2_pairs: usize,
    pub bert: Prf<T>,
    pub rouge1: Prf<T>,
    pub rouge2: Prf<T>,
    #[serde(rename = "rougeL")]
    pub rouge_l: Prf<T>,
    pub bleu: T,
    pub meteor: T,
    pub meteor_variant: String,
}

/// Aggregates benchmark rows, one report per (model, mode, use case) in
/// order of first appearance. Rows without a use case group under `all`.
pub fn summarize<T: Real>(
    rows: &[BenchmarkRow<T>],
    embedder: &dyn Embedder<T>,
) -> Result<Vec<MetricReport<T>>> {
    let mut keys: Vec<(String, Mode, String)> = Vec::new();
    let mut scored: Vec<Option<PairScores<T>>> = Vec::with_capacity(rows.len());
    for row in rows {
        let key = group_key(row);
        if !keys.contains(&key) {
            keys.push(key);
        }
        scored.push(if row.record.error.is_some() {
            None
        } else {
            Some(score_pair(&row.record.answer, &row.reference, embedder)?)
        });
    }
    let mut reports = Vec::new();
    for key in keys {
        let members: Vec<usize> = (0..rows.len())
            .filter(|&i| group_key(&rows[i]) == key)
            .collect();
        let ok: Vec<&PairScores<T>> = members.iter().filter_map(|&i| scored[i].as_ref()).collect();
        let rouge2: Vec<&MetricScore<T>> = ok.iter().filter_map(|s| s.rouge2.as_ref()).collect();
        let pct = |v: Vec<T>| mean(&v).unwrap_or_else(T::zero);
        reports.push(MetricReport {
            model: key.0,
            mode: key.1,
            use_case: key.2,
            pairs: members.len(),
            failed: members.len() - ok.len(),
            rouge2_pairs: rouge2.len(),
            bert: Prf::mean_of(ok.iter().map(|s| &s.bert)),
            rouge1: Prf::mean_of(ok.iter().map(|s| &s.rouge1)),
            rouge2: Prf::mean_of(rouge2.into_iter()),
            rouge_l: Prf::mean_of(ok.iter().map(|s| &s.rouge_l)),
            bleu: pct(ok.iter().map(|s| s.bleu).collect()),
            meteor: pct(ok.iter().map(|s| s.meteor).collect()),
            meteor_variant: "meteor-es".into(),
        });
    }
    Ok(reports)
}

fn group_key<T>(row: &BenchmarkRow<T>) -> (String, Mode, String) {
    (
        row.record.model.clone(),
        row.record.request.mode,
        row.use_case
            .map(|u| u.as_str().to_owned())
            .unwrap_or_else(|| "all".into()),
    )
}
