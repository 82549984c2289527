//! Best-of-n answer selection.
//!
//! Candidates are scored independently against the query context and the
//! first maximum wins. The default scorer compares hash embeddings of the
//! candidate and a reference text, a text proxy for image-text alignment.
//! Reranking of this kind can trade fluency for alignment on caption-style
//! tasks, which is why the scorer is pluggable.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embed::{Embedder, HashEmbedder};
use crate::error::{Error, Result};
use crate::math::{cosine_similarity, norm_sq};

pub const DEFAULT_POOL_SIZE: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryContext {
    #[serde(default)]
    pub image_id: String,
    #[serde(default)]
    pub question: String,
    /// Text the default scorer compares candidates against.
    #[serde(default)]
    pub reference: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CandidatePool {
    pub context: QueryContext,
    pub candidates: Vec<String>,
}

impl CandidatePool {
    pub fn new(context: QueryContext, candidates: Vec<String>) -> Result<Self> {
        let pool = Self { context, candidates };
        pool.validate()?;
        Ok(pool)
    }

    pub fn validate(&self) -> Result<()> {
        if self.candidates.is_empty() {
            return Err(Error::input("candidate pool is empty"));
        }
        Ok(())
    }

    /// The first `n` candidates, in generation order.
    pub fn truncated(&self, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::config("sasg.n must be at least 1"));
        }
        Ok(Self {
            context: self.context.clone(),
            candidates: self.candidates.iter().take(n).cloned().collect(),
        })
    }
}

pub trait Scorer: Send + Sync {
    fn score(&self, candidate: &str, context: &QueryContext) -> Result<f64>;
}

/// Cosine between hash embeddings of candidate and reference. A zero
/// embedding on either side scores 0.
#[derive(Debug, Clone, Copy, Default)]
pub struct HashScorer {
    pub embedder: HashEmbedder,
}

impl Scorer for HashScorer {
    fn score(&self, candidate: &str, context: &QueryContext) -> Result<f64> {
        let c = self.embedder.embed(candidate);
        let r = self.embedder.embed(&context.reference);
        if norm_sq(&c) == 0.0 || norm_sq(&r) == 0.0 {
            return Ok(0.0);
        }
        cosine_similarity(&c, &r)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoredPool {
    /// Failed candidates hold `-inf`.
    pub scores: Vec<f64>,
    pub selected_index: usize,
    /// Indices whose scoring failed.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub failed: Vec<usize>,
}

/// First index holding the maximum; `None` when every entry is `-inf`.
pub fn first_max(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        if s == f64::NEG_INFINITY {
            continue;
        }
        if best.is_none_or(|b| s > scores[b]) {
            best = Some(i);
        }
    }
    best
}

/// Score every candidate and pick the first maximum.
///
/// Candidates whose scoring fails, or yields a non-finite value, get `-inf`
/// and cannot be selected. If all fail the selection fails.
pub fn select_best(pool: &CandidatePool, scorer: &dyn Scorer) -> Result<ScoredPool> {
    pool.validate()?;
    // ordered collect keeps the argmax independent of the thread count
    let outcomes: Vec<Result<f64>> = pool
        .candidates
        .par_iter()
        .map(|c| scorer.score(c, &pool.context))
        .collect();
    let mut scores = Vec::with_capacity(outcomes.len());
    let mut failed = Vec::new();
    for (i, o) in outcomes.into_iter().enumerate() {
        match o {
            Ok(s) if s.is_finite() => scores.push(s),
            _ => {
                failed.push(i);
                scores.push(f64::NEG_INFINITY);
            }
        }
    }
    let selected_index = first_max(&scores).ok_or_else(|| {
        Error::SelectionFailed(format!("all {} candidates failed scoring", scores.len()))
    })?;
    Ok(ScoredPool { scores, selected_index, failed })
}
