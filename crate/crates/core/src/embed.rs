//! Embedding gateway: a remote endpoint client and a deterministic
//! feature-hashing stub behind one [`Embedder`] trait.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::http::{JsonClient, Refusal, RetryPolicy};
use crate::scalar::Real;

pub const DEFAULT_STUB_DIM: usize = 256;
pub const MIN_STUB_DIM: usize = 8;
pub const MAX_BATCH: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector<T> {
    values: Vec<T>,
}

impl<T: Real> EmbeddingVector<T> {
    /// Rejects empty and non-finite vectors.
    pub fn new(values: Vec<T>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Integrity(
                "embedding must have at least one component".into(),
            ));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Integrity(format!(
                "embedding component {i} is not finite"
            )));
        }
        Ok(EmbeddingVector { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn dot(&self, other: &Self) -> T {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(&a, &b)| a * b)
            .sum()
    }

    pub fn norm(&self) -> T {
        self.dot(self).sqrt()
    }

    /// Lossless widening for serialization.
    pub fn to_f64(&self) -> Vec<f64> {
        self.values.iter().map(|v| v.as_f64()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenEmbedding<T> {
    pub token: String,
    pub vector: EmbeddingVector<T>,
}

pub trait Embedder<T: Real>: Send + Sync {
    fn dim(&self) -> usize;

    /// One vector per input, order preserved.
    fn embed(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector<T>>>;

    /// Per-token embeddings in surface order.
    fn embed_tokens(&self, text: &str) -> Result<Vec<TokenEmbedding<T>>>;

    fn embed_one(&self, text: &str) -> Result<EmbeddingVector<T>> {
        self.embed(&[text])?
            .pop()
            .ok_or_else(|| Error::Integrity("embedder returned no vector".into()))
    }
}

fn check_texts(texts: &[&str]) -> Result<()> {
    if texts.is_empty() {
        return Err(Error::Precondition(
            "embed requires at least one text".into(),
        ));
    }
    if let Some(i) = texts.iter().position(|t| t.is_empty()) {
        return Err(Error::Precondition(format!("text {i} is empty")));
    }
    Ok(())
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Bucket index and sign a token contributes to in a `dim`-wide stub vector.
pub fn stub_bucket(token: &str, dim: usize) -> (usize, bool) {
    let h = fnv1a(token.as_bytes());
    let bucket = (h % dim as u64) as usize;
    let positive = mix64(h) >> 63 == 0;
    (bucket, positive)
}

/// Feature-hashed, L2-normalized bag of whitespace tokens.
pub fn stub_embed<T: Real>(text: &str, dim: usize) -> Result<EmbeddingVector<T>> {
    if dim < MIN_STUB_DIM {
        return Err(Error::param(
            "dim",
            format!("stub dimension must be >= {MIN_STUB_DIM}"),
        ));
    }
    let mut values = vec![T::zero(); dim];
    let mut tokens = 0usize;
    for token in text.split_whitespace() {
        let (bucket, positive) = stub_bucket(token, dim);
        if positive {
            values[bucket] += T::one();
        } else {
            values[bucket] -= T::one();
        }
        tokens += 1;
    }
    if tokens == 0 {
        return Err(Error::Degenerate(
            "stub embedding of all-whitespace text".into(),
        ));
    }
    let norm = values.iter().map(|&v| v * v).sum::<T>().sqrt();
    if norm <= T::zero() {
        // Only reachable when the hashed contributions cancel exactly.
        return Err(Error::Degenerate("stub embedding has zero norm".into()));
    }
    values.iter_mut().for_each(|v| *v /= norm);
    EmbeddingVector::new(values)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StubEmbedder {
    dim: usize,
}

impl Default for StubEmbedder {
    fn default() -> Self {
        StubEmbedder {
            dim: DEFAULT_STUB_DIM,
        }
    }
}

impl StubEmbedder {
    pub fn new(dim: usize) -> Result<Self> {
        if dim < MIN_STUB_DIM {
            return Err(Error::param(
                "dim",
                format!("stub dimension must be >= {MIN_STUB_DIM}"),
            ));
        }
        Ok(StubEmbedder { dim })
    }
}

impl<T: Real> Embedder<T> for StubEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector<T>>> {
        check_texts(texts)?;
        texts.iter().map(|t| stub_embed(t, self.dim)).collect()
    }

    fn embed_tokens(&self, text: &str) -> Result<Vec<TokenEmbedding<T>>> {
        if text.is_empty() {
            return Err(Error::Precondition(
                "embed_tokens requires non-empty text".into(),
            ));
        }
        text.split_whitespace()
            .map(|token| {
                Ok(TokenEmbedding {
                    token: token.to_owned(),
                    vector: stub_embed(token, self.dim)?,
                })
            })
            .collect()
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    texts: &'a [&'a str],
}

#[derive(Deserialize)]
struct EmbedResponse {
    vectors: Vec<Vec<f64>>,
}

#[derive(Serialize)]
struct EmbedTokensRequest<'a> {
    text: &'a str,
}

#[derive(Deserialize)]
struct EmbedTokensResponse {
    tokens: Vec<String>,
    vectors: Vec<Vec<f64>>,
}

/// Client for the `/v1/embed` and `/v1/embed_tokens` wire contract.
#[derive(Debug, Clone)]
pub struct HttpEmbedder {
    client: JsonClient,
    dim: usize,
}

impl HttpEmbedder {
    pub fn new(base_url: impl Into<String>, dim: usize) -> Self {
        Self::with_retry(base_url, dim, RetryPolicy::default())
    }

    pub fn with_retry(base_url: impl Into<String>, dim: usize, retry: RetryPolicy) -> Self {
        HttpEmbedder {
            client: JsonClient::with_retry(base_url, retry),
            dim,
        }
    }

    fn convert<T: Real>(&self, raw: Vec<f64>) -> Result<EmbeddingVector<T>> {
        if raw.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: raw.len(),
            });
        }
        EmbeddingVector::new(raw.into_iter().map(T::of).collect())
    }
}

impl<T: Real> Embedder<T> for HttpEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector<T>>> {
        check_texts(texts)?;
        let mut out = Vec::with_capacity(texts.len());
        for batch in texts.chunks(MAX_BATCH) {
            let resp: EmbedResponse = self
                .client
                .post("/v1/embed", &EmbedRequest { texts: batch })?;
            if resp.vectors.len() != batch.len() {
                return Err(Error::Integrity(format!(
                    "requested {} vectors, received {}",
                    batch.len(),
                    resp.vectors.len()
                )));
            }
            for raw in resp.vectors {
                out.push(self.convert(raw)?);
            }
        }
        Ok(out)
    }

    fn embed_tokens(&self, text: &str) -> Result<Vec<TokenEmbedding<T>>> {
        if text.is_empty() {
            return Err(Error::Precondition(
                "embed_tokens requires non-empty text".into(),
            ));
        }
        let resp: EmbedTokensResponse = match self
            .client
            .try_post("/v1/embed_tokens", &EmbedTokensRequest { text })?
        {
            Ok(resp) => resp,
            Err(Refusal::Status(status, _))
                if status.as_u16() == 404 || status.as_u16() == 405 || status.as_u16() == 501 =>
            {
                return Err(Error::Capability(format!(
                    "{} does not support token embeddings ({status})",
                    self.client.base_url()
                )))
            }
            Err(Refusal::Status(status, body)) => {
                return Err(Error::Integrity(format!(
                    "embed_tokens rejected with {status}: {body}"
                )))
            }
        };
        if resp.tokens.len() != resp.vectors.len() {
            return Err(Error::Integrity(format!(
                "{} tokens but {} vectors",
                resp.tokens.len(),
                resp.vectors.len()
            )));
        }
        resp.tokens
            .into_iter()
            .zip(resp.vectors)
            .map(|(token, raw)| {
                if token.is_empty() {
                    return Err(Error::Integrity("empty token in response".into()));
                }
                Ok(TokenEmbedding {
                    token,
                    vector: self.convert(raw)?,
                })
            })
            .collect()
    }
}

/// Delegates to `inner`, answering `embed_tokens` with the stub when
/// `inner` reports no token-level support.
pub struct StubTokenFallback<'a, T> {
    inner: &'a dyn Embedder<T>,
    stub: StubEmbedder,
}

impl<'a, T: Real> StubTokenFallback<'a, T> {
    pub fn new(inner: &'a dyn Embedder<T>) -> Self {
        StubTokenFallback {
            inner,
            stub: StubEmbedder::default(),
        }
    }
}

impl<T: Real> Embedder<T> for StubTokenFallback<'_, T> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn embed(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector<T>>> {
        self.inner.embed(texts)
    }

    fn embed_tokens(&self, text: &str) -> Result<Vec<TokenEmbedding<T>>> {
        match self.inner.embed_tokens(text) {
            Err(Error::Capability(why)) => {
                log::debug!("token embeddings from stub: {why}");
                self.stub.embed_tokens(text)
            }
            other => other,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cos(a: &EmbeddingVector<f64>, b: &EmbeddingVector<f64>) -> f64 {
        a.dot(b) / (a.norm() * b.norm())
    }

    #[test]
    fn identical_texts_give_identical_vectors() {
        let e = StubEmbedder::default();
        let v: Vec<EmbeddingVector<f64>> = e.embed(&["a", "a"]).unwrap();
        assert_eq!(v[0], v[1]);
    }

    #[test]
    fn empty_batch_is_a_precondition_error() {
        let e = StubEmbedder::default();
        let r: Result<Vec<EmbeddingVector<f64>>> = e.embed(&[]);
        assert!(matches!(r, Err(Error::Precondition(_))));
    }

    #[test]
    fn stub_vectors_are_unit_norm() {
        let v: EmbeddingVector<f64> = stub_embed("x", 256).unwrap();
        assert!((v.norm() - 1.0).abs() <= 1e-9);
        let w: EmbeddingVector<f32> = stub_embed("some longer text here", 256).unwrap();
        assert!((w.norm() - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn whitespace_only_text_is_degenerate() {
        assert!(matches!(
            stub_embed::<f64>("  \t\n", 256),
            Err(Error::Degenerate(_))
        ));
        assert!(matches!(
            stub_embed::<f64>("a", 4),
            Err(Error::Parameter { .. })
        ));
    }

    #[test]
    fn repeated_token_cosine_matches_hand_value() {
        // "a" and "b" must land in different buckets for the hand value.
        assert_ne!(stub_bucket("a", 256).0, stub_bucket("b", 256).0);
        let u: EmbeddingVector<f64> = stub_embed("a a b", 256).unwrap();
        let v: EmbeddingVector<f64> = stub_embed("a b", 256).unwrap();
        let expected = 3.0 / (5f64.sqrt() * 2f64.sqrt());
        assert!((cos(&u, &v) - expected).abs() < 1e-12);
        assert!((expected - 0.9487).abs() < 1e-4);
    }

    #[test]
    fn disjoint_buckets_are_orthogonal() {
        assert_ne!(stub_bucket("router", 256).0, stub_bucket("firmware", 256).0);
        let u: EmbeddingVector<f64> = stub_embed("router", 256).unwrap();
        let v: EmbeddingVector<f64> = stub_embed("firmware", 256).unwrap();
        assert_eq!(cos(&u, &v), 0.0);
    }

    #[test]
    fn token_embeddings_follow_surface_order() {
        let e = StubEmbedder::default();
        let t: Vec<TokenEmbedding<f64>> = e.embed_tokens("hello world").unwrap();
        let tokens: Vec<&str> = t.iter().map(|t| t.token.as_str()).collect();
        assert_eq!(tokens, vec!["hello", "world"]);

        let t: Vec<TokenEmbedding<f64>> = e.embed_tokens("a b a").unwrap();
        assert_eq!(t[0].vector, t[2].vector);

        let r: Result<Vec<TokenEmbedding<f64>>> = e.embed_tokens("");
        assert!(matches!(r, Err(Error::Precondition(_))));
    }

    #[test]
    fn non_finite_components_are_rejected() {
        assert!(EmbeddingVector::new(vec![1.0, f64::NAN]).is_err());
        assert!(EmbeddingVector::<f64>::new(vec![]).is_err());
    }
}
