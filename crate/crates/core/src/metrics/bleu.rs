use std::collections::HashMap;

use super::TokenSeq;
use crate::error::{Error, Result};
use crate::scalar::Real;

pub const DEFAULT_MAX_N: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bleu<T> {
    /// Percent scale, `[0, 100]`.
    pub score: T,
    /// Set when the candidate is empty and the score is 0 by convention.
    pub degenerate: bool,
}

/// Sentence BLEU with clipped n-gram precisions and brevity penalty.
///
/// Orders above the candidate length are left out of the geometric mean.
/// An order with no matches (n >= 2) uses `1 / (2 * (ngrams + 1))`; a zero
/// unigram precision gives 0.
pub fn bleu<T: Real>(
    candidate: &TokenSeq,
    references: &[TokenSeq],
    max_n: usize,
) -> Result<Bleu<T>> {
    if references.is_empty() || references.iter().all(TokenSeq::is_empty) {
        return Err(Error::Precondition(
            "bleu needs a non-empty reference".into(),
        ));
    }
    if max_n == 0 {
        return Err(Error::param("max_n", "must be at least 1"));
    }
    if candidate.is_empty() {
        return Ok(Bleu {
            score: T::zero(),
            degenerate: true,
        });
    }
    let orders = max_n.min(candidate.len());
    let mut log_sum = T::zero();
    for n in 1..=orders {
        let cand = candidate.ngram_counts(n);
        let mut max_ref: HashMap<&[String], usize> = HashMap::new();
        for r in references {
            for (gram, count) in r.ngram_counts(n) {
                let e = max_ref.entry(gram).or_insert(0);
                *e = (*e).max(count);
            }
        }
        let matched: usize = cand
            .iter()
            .map(|(gram, &c)| c.min(max_ref.get(gram).copied().unwrap_or(0)))
            .sum();
        let total = candidate.ngram_total(n);
        let p = if matched > 0 {
            T::of_usize(matched) / T::of_usize(total)
        } else if n == 1 {
            return Ok(Bleu {
                score: T::zero(),
                degenerate: false,
            });
        } else {
            T::one() / T::of_usize(2 * (total + 1))
        };
        log_sum += p.ln();
    }
    let c = candidate.len();
    let r = references
        .iter()
        .map(|r| r.len())
        .min_by_key(|&len| (len.abs_diff(c), len))
        .unwrap_or(c);
    let bp = if c >= r {
        T::one()
    } else {
        (T::one() - T::of_usize(r) / T::of_usize(c)).exp()
    };
    let geo = (log_sum / T::of_usize(orders)).exp();
    Ok(Bleu {
        score: T::hundred() * bp * geo,
        degenerate: false,
    })
}
