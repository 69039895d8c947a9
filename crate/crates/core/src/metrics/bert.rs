use super::{MetricScore, TokenSeq};
use crate::embed::{Embedder, TokenEmbedding};
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::store::cosine;

/// Mean over `from` of the best cosine to any token in `to`, each best
/// value floored at 0.
fn greedy<T: Real>(from: &[TokenEmbedding<T>], to: &[TokenEmbedding<T>]) -> Result<T> {
    let mut total = T::zero();
    for a in from {
        let mut best = T::zero();
        for b in to {
            best = best.max(cosine(&a.vector, &b.vector)?);
        }
        total += best;
    }
    Ok(total / T::of_usize(from.len()))
}

/// Greedy-matching embedding similarity without idf weighting or baseline
/// rescaling.
pub fn bert_score<T: Real>(
    candidate: &TokenSeq,
    reference: &TokenSeq,
    embedder: &dyn Embedder<T>,
) -> Result<MetricScore<T>> {
    if candidate.is_empty() || reference.is_empty() {
        return Err(Error::Precondition(
            "bert score needs non-empty sequences".into(),
        ));
    }
    let cand = embedder.embed_tokens(&candidate.joined())?;
    let refs = embedder.embed_tokens(&reference.joined())?;
    if cand.is_empty() || refs.is_empty() {
        return Err(Error::Degenerate(
            "embedder returned no token embeddings".into(),
        ));
    }
    let precision = greedy(&cand, &refs)?;
    let recall = greedy(&refs, &cand)?;
    Ok(MetricScore::from_pr("bert", precision, recall))
}
