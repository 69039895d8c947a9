use super::{MetricScore, TokenSeq};
use crate::error::{Error, Result};
use crate::scalar::Real;

/// ROUGE-N with clipped multiset overlap.
pub fn rouge_n<T: Real>(
    candidate: &TokenSeq,
    reference: &TokenSeq,
    n: usize,
) -> Result<MetricScore<T>> {
    if n == 0 {
        return Err(Error::param("n", "must be at least 1"));
    }
    let ref_total = reference.ngram_total(n);
    if ref_total == 0 {
        return Err(Error::Undefined(format!(
            "rouge-{n} recall: reference has fewer than {n} tokens"
        )));
    }
    let cand = candidate.ngram_counts(n);
    let refs = reference.ngram_counts(n);
    let overlap: usize = cand
        .iter()
        .map(|(gram, &c)| c.min(refs.get(gram).copied().unwrap_or(0)))
        .sum();
    let cand_total = candidate.ngram_total(n);
    let precision = if cand_total == 0 {
        T::zero()
    } else {
        T::of_usize(overlap) / T::of_usize(cand_total)
    };
    let recall = T::of_usize(overlap) / T::of_usize(ref_total);
    Ok(MetricScore::from_pr(
        &format!("rouge{n}"),
        precision,
        recall,
    ))
}

pub(crate) fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L from the longest common subsequence, F with beta = 1.
pub fn rouge_l<T: Real>(candidate: &TokenSeq, reference: &TokenSeq) -> Result<MetricScore<T>> {
    if candidate.is_empty() || reference.is_empty() {
        return Err(Error::Precondition(
            "rouge-l needs non-empty sequences".into(),
        ));
    }
    let l = T::of_usize(lcs_len(candidate.tokens(), reference.tokens()));
    Ok(MetricScore::from_pr(
        "rougeL",
        l / T::of_usize(candidate.len()),
        l / T::of_usize(reference.len()),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(text: &str) -> TokenSeq {
        TokenSeq::tokenize(text)
    }

    #[test]
    fn rouge1_hand_fixture() {
        let m = rouge_n::<f64>(&s("the cat"), &s("the cat sat"), 1).unwrap();
        assert!((m.recall.unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(m.precision, Some(1.0));
        assert!((m.f1 - 0.8).abs() < 1e-12);
    }

    #[test]
    fn identity_and_disjoint() {
        let m = rouge_n::<f64>(&s("a b c"), &s("a b c"), 2).unwrap();
        assert_eq!((m.precision, m.recall, m.f1), (Some(1.0), Some(1.0), 1.0));
        let m = rouge_n::<f64>(&s("a b"), &s("c d"), 1).unwrap();
        assert_eq!(m.f1, 0.0);
    }

    #[test]
    fn short_reference_is_undefined() {
        assert!(matches!(
            rouge_n::<f64>(&s("a b"), &s("a"), 2),
            Err(Error::Undefined(_))
        ));
    }

    #[test]
    fn clipping() {
        let m = rouge_n::<f64>(&s("the the the"), &s("the cat"), 1).unwrap();
        assert!((m.precision.unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(m.recall, Some(0.5));
    }

    #[test]
    fn rouge_l_hand_fixtures() {
        let m = rouge_l::<f64>(&s("a b c d"), &s("a c b d")).unwrap();
        assert_eq!((m.precision, m.recall), (Some(0.75), Some(0.75)));
        assert!((m.f1 - 0.75).abs() < 1e-12);
        let m = rouge_l::<f64>(&s("a b c"), &s("c b a")).unwrap();
        assert!((m.f1 - 1.0 / 3.0).abs() < 1e-12);
    }
}
