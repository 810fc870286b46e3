//! Deterministic bag-of-words hashed embeddings.
//!
//! Texts are lowercased, split on non-alphanumeric boundaries, and each token
//! is hashed with **FNV-1a 64-bit** (offset basis `0xcbf29ce484222325`, prime
//! `0x100000001b3`, no seed) into one of `dim` buckets (`hash % dim`). Bucket
//! counts are accumulated and the vector is L2-normalized. The hash choice is
//! frozen: changing it silently changes every similarity score downstream, so
//! the golden-vector fixture in `tests/data/embedding_golden.tsv` pins the
//! exact output on several texts.
//!
//! Empty text (no tokens after splitting) embeds to the zero vector, and
//! cosine against a zero vector is defined as 0.0 rather than NaN.

use crate::error::Error;

/// Default number of hash buckets.
pub const DEFAULT_DIM: usize = 64;

/// An L2-normalized (or zero) vector of bucket weights.
pub type EmbeddingVector = Vec<f64>;

/// FNV-1a 64-bit over raw bytes. Frozen — see module docs.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = OFFSET;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(PRIME);
    }
    h
}

/// Lowercased alphanumeric tokens of `text`, in order.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

/// Deterministic text embedder with a fixed bucket count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Embedder {
    dim: usize,
}

impl Default for Embedder {
    fn default() -> Self {
        Embedder { dim: DEFAULT_DIM }
    }
}

impl Embedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Embedder { dim }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Bucket index a single token falls into.
    pub fn bucket(&self, token: &str) -> usize {
        (fnv1a64(token.as_bytes()) % self.dim as u64) as usize
    }

    /// Embed `text`: accumulate token counts per bucket, then L2-normalize.
    /// Token order never matters — counts are integers, so accumulation is
    /// exact and permutation-invariant bit for bit.
    pub fn embed(&self, text: &str) -> EmbeddingVector {
        let mut v = vec![0.0f64; self.dim];
        let mut any = false;
        for token in tokenize(text) {
            v[self.bucket(&token)] += 1.0;
            any = true;
        }
        if !any {
            return v; // zero vector for token-less text
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            for x in &mut v {
                *x /= norm;
            }
        }
        v
    }
}

/// Cosine similarity of two equal-dimension vectors.
///
/// Returns 0.0 when either vector has zero norm. Mismatched dimensions are a
/// caller bug and reported as a typed error.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64, Error> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok(dot / (na * nb))
}
