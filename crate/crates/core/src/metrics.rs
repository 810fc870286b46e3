//! Solution quality metrics: LM-call usage cost, claim-set precision/recall,
//! and embedding similarity.
//!
//! The cost curve is `1 − exp(−n_calls / n_max)`, where `n_max` is the
//! largest call count among the candidate solutions being compared for one
//! intent. Precision and recall operate on canonicalized claim sets (one
//! claim per command field–action pair); their denominators are the response
//! and reference set sizes respectively, and an empty denominator is a typed
//! error — never NaN.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::embedding::{cosine, Embedder};
use crate::error::Error;

/// Canonical claim: lowercased, inner whitespace collapsed to single spaces.
pub fn canonical_claim(raw: &str) -> String {
    raw.to_lowercase().split_whitespace().collect::<Vec<_>>().join(" ")
}

/// A set of canonicalized atomic command assertions.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ClaimSet {
    claims: BTreeSet<String>,
}

impl ClaimSet {
    pub fn new<I, S>(raw: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        ClaimSet {
            claims: raw
                .into_iter()
                .map(|s| canonical_claim(s.as_ref()))
                .filter(|s| !s.is_empty())
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.claims.len()
    }

    pub fn is_empty(&self) -> bool {
        self.claims.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.claims.iter().map(String::as_str)
    }

    pub fn intersection_size(&self, other: &ClaimSet) -> usize {
        self.claims.intersection(&other.claims).count()
    }
}

/// `1 − exp(−n_calls / n_max)`: saturating cost of LM usage relative to the
/// heaviest candidate. `n_max == 0` (a candidate set with no LM calls at all)
/// yields cost 0 for everyone.
pub fn lm_call_usage_cost(n_calls: u32, n_max: u32) -> f64 {
    if n_max == 0 {
        return 0.0;
    }
    1.0 - (-f64::from(n_calls) / f64::from(n_max)).exp()
}

/// |response ∩ reference| / |response|. Empty response set is undefined.
pub fn precision(response: &ClaimSet, reference: &ClaimSet) -> Result<f64, Error> {
    if response.is_empty() {
        return Err(Error::EmptyResponseClaims);
    }
    Ok(response.intersection_size(reference) as f64 / response.len() as f64)
}

/// |response ∩ reference| / |reference|. Empty reference set is undefined.
pub fn recall(response: &ClaimSet, reference: &ClaimSet) -> Result<f64, Error> {
    if reference.is_empty() {
        return Err(Error::EmptyReferenceClaims);
    }
    Ok(response.intersection_size(reference) as f64 / reference.len() as f64)
}

/// Cosine similarity of the two texts' embeddings.
pub fn similarity_score(embedder: &Embedder, a: &str, b: &str) -> f64 {
    let va = embedder.embed(a);
    let vb = embedder.embed(b);
    cosine(&va, &vb).expect("embedder emits fixed-dimension vectors")
}

/// The triple each candidate solution is judged on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsTriple {
    pub usage_cost: f64,
    pub similarity: f64,
    pub precision: f64,
}
