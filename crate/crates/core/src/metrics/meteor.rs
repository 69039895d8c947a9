use super::porter::stem;
use super::TokenSeq;
use crate::error::{Error, Result};
use crate::scalar::Real;

pub const METEOR_ALPHA: f64 = 0.9;
pub const METEOR_BETA: f64 = 3.0;
pub const METEOR_GAMMA: f64 = 0.5;

/// Aligns candidate positions to reference positions: exact matches first,
/// then Porter-stem matches on what is left. Each candidate token, in
/// order, takes the leftmost free reference token.
fn align(candidate: &[String], reference: &[String]) -> Vec<Option<usize>> {
    let mut used = vec![false; reference.len()];
    let mut alignment = vec![None; candidate.len()];
    let stage =
        |alignment: &mut Vec<Option<usize>>, used: &mut Vec<bool>, key: &dyn Fn(&str) -> String| {
            let ref_keys: Vec<String> = reference.iter().map(|t| key(t)).collect();
            for (i, tok) in candidate.iter().enumerate() {
                if alignment[i].is_some() {
                    continue;
                }
                let k = key(tok);
                if let Some(j) = (0..reference.len()).find(|&j| !used[j] && ref_keys[j] == k) {
                    used[j] = true;
                    alignment[i] = Some(j);
                }
            }
        };
    stage(&mut alignment, &mut used, &|t| t.to_owned());
    stage(&mut alignment, &mut used, &|t| stem(t));
    alignment
}

/// Number of runs of aligned tokens adjacent in both sequences.
fn chunks(alignment: &[Option<usize>]) -> usize {
    let mut count = 0;
    let mut prev: Option<(usize, usize)> = None;
    for (i, a) in alignment.iter().enumerate() {
        if let Some(j) = *a {
            match prev {
                Some((pi, pj)) if pi + 1 == i && pj + 1 == j => {}
                _ => count += 1,
            }
            prev = Some((i, j));
        }
    }
    count
}

/// METEOR over exact and stem matches (no synonym stage), percent scale.
pub fn meteor<T: Real>(candidate: &TokenSeq, reference: &TokenSeq) -> Result<T> {
    if candidate.is_empty() || reference.is_empty() {
        return Err(Error::Precondition(
            "meteor needs non-empty sequences".into(),
        ));
    }
    let alignment = align(candidate.tokens(), reference.tokens());
    let m = alignment.iter().filter(|a| a.is_some()).count();
    if m == 0 {
        return Ok(T::zero());
    }
    let mf = T::of_usize(m);
    let p = mf / T::of_usize(candidate.len());
    let r = mf / T::of_usize(reference.len());
    let alpha = T::of(METEOR_ALPHA);
    let f_mean = p * r / (alpha * p + (T::one() - alpha) * r);
    let frag = T::of_usize(chunks(&alignment)) / mf;
    let penalty = T::of(METEOR_GAMMA) * frag.powf(T::of(METEOR_BETA));
    Ok(T::hundred() * f_mean * (T::one() - penalty))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(text: &str) -> TokenSeq {
        TokenSeq::tokenize(text)
    }

    #[test]
    fn identity_follows_penalty() {
        let v: f64 = meteor(&s("a b c d e"), &s("a b c d e")).unwrap();
        assert!((v - 99.6).abs() < 1e-9);
    }

    #[test]
    fn disjoint_is_zero() {
        assert_eq!(meteor::<f64>(&s("router"), &s("banana")).unwrap(), 0.0);
    }

    #[test]
    fn stem_stage() {
        assert_eq!(stem("cats"), stem("cat"));
        assert_eq!(stem("sleeping"), stem("sleeps"));
        // m = 2, one chunk: P = R = 1, penalty 0.5 / 8.
        let v: f64 = meteor(&s("cats sleeping"), &s("cat sleeps")).unwrap();
        assert!((v - 93.75).abs() < 1e-9);
    }

    #[test]
    fn fragmentation() {
        // All four tokens align but no two neighbours stay adjacent in the
        // reference, so there are four chunks.
        let v: f64 = meteor(&s("a b c d"), &s("a c b d")).unwrap();
        let expected = 100.0 * (1.0 - 0.5 * 1.0f64.powi(3));
        assert!((v - expected).abs() < 1e-9);
    }

    #[test]
    fn exact_stage_wins_over_stem() {
        let a = align(
            &["cat".into(), "cats".into()],
            &["cats".into(), "cat".into()],
        );
        assert_eq!(a, vec![Some(1), Some(0)]);
    }
}
