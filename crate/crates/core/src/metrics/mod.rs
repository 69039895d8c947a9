//! Text-overlap and embedding-similarity metrics for generated answers.
//!
//! All metrics operate on [`TokenSeq`] values produced by one tokenizer:
//! lowercase, split on whitespace, strip leading and trailing punctuation.

mod bert;
mod bleu;
mod meteor;
pub mod porter;
mod report;
mod rouge;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::scalar::{harmonic, Real};

pub use bert::bert_score;
pub use bleu::{bleu, Bleu, DEFAULT_MAX_N};
pub use meteor::{meteor, METEOR_ALPHA, METEOR_BETA, METEOR_GAMMA};
pub use report::{score_pair, summarize, MetricReport, PairScores, Prf};
pub use rouge::{rouge_l, rouge_n};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct TokenSeq(Vec<String>);

fn is_punctuation(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(
            c,
            '\u{2018}'
                | '\u{2019}'
                | '\u{201C}'
                | '\u{201D}'
                | '\u{2013}'
                | '\u{2014}'
                | '\u{2026}'
                | '\u{00AB}'
                | '\u{00BB}'
        )
}

impl TokenSeq {
    pub fn tokenize(text: &str) -> Self {
        TokenSeq(
            text.split_whitespace()
                .map(|t| t.trim_matches(is_punctuation).to_lowercase())
                .filter(|t| !t.is_empty())
                .collect(),
        )
    }

    /// Wraps tokens that are already normalized.
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        TokenSeq(tokens.into_iter().map(Into::into).collect())
    }

    pub fn tokens(&self) -> &[String] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn joined(&self) -> String {
        self.0.join(" ")
    }

    pub(crate) fn ngram_counts(&self, n: usize) -> HashMap<&[String], usize> {
        let mut counts = HashMap::new();
        if n > 0 && self.0.len() >= n {
            for gram in self.0.windows(n) {
                *counts.entry(gram).or_insert(0) += 1;
            }
        }
        counts
    }

    pub(crate) fn ngram_total(&self, n: usize) -> usize {
        (self.0.len() + 1).saturating_sub(n)
    }
}

/// One metric value. `scalar` is the percent-scale headline number.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricScore<T> {
    pub name: String,
    pub precision: Option<T>,
    pub recall: Option<T>,
    pub f1: T,
    pub scalar: T,
}

impl<T: Real> MetricScore<T> {
    pub fn from_pr(name: &str, precision: T, recall: T) -> Self {
        let f1 = harmonic(precision, recall);
        MetricScore {
            name: name.to_owned(),
            precision: Some(precision),
            recall: Some(recall),
            f1,
            scalar: T::hundred() * f1,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenizer_is_pinned() {
        let t = TokenSeq::tokenize("  Hello, World! (it's) -- “quoted” ");
        assert_eq!(t.tokens(), &["hello", "world", "it's", "quoted"]);
    }

    #[test]
    fn ngram_totals() {
        let t = TokenSeq::tokenize("a b c");
        assert_eq!(t.ngram_total(1), 3);
        assert_eq!(t.ngram_total(3), 1);
        assert_eq!(t.ngram_total(4), 0);
        assert!(t.ngram_counts(4).is_empty());
    }
}
