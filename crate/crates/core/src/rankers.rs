//! The expensive ranker and its budget accounting.
//!
//! Real cross-encoders are out of process; here a ranker is anything that
//! maps `(query, doc)` to a score. Three implementations ship: a graded
//! oracle over qrels, a latent linear model over caller-supplied features,
//! and a replay of cached scores. Noise is derived from a hash of
//! `(seed, query, doc)`, so the order in which documents are scored never
//! changes their scores.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::corpus_io::{load_score_file, Qrels};
use crate::error::{OreError, Result};
use crate::text::stable_hash;

pub trait Ranker: Send + Sync {
    fn score(&self, query_id: &str, doc_id: &str) -> Result<f64>;
}

impl<R: Ranker + ?Sized> Ranker for Arc<R> {
    fn score(&self, query_id: &str, doc_id: &str) -> Result<f64> {
        (**self).score(query_id, doc_id)
    }
}

/// Standard normal draw seeded by `(seed, query, doc)`.
pub fn pair_noise(seed: u64, query_id: &str, doc_id: &str) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(stable_hash(
        seed,
        &[query_id.as_bytes(), doc_id.as_bytes()],
    ));
    StandardNormal.sample(&mut rng)
}

/// `grade(q, d) + N(0, sigma)`.
#[derive(Debug, Clone)]
pub struct GradedOracle {
    qrels: Arc<Qrels>,
    sigma: f64,
    seed: u64,
}

impl GradedOracle {
    pub fn new(qrels: Arc<Qrels>, sigma: f64, seed: u64) -> Result<Self> {
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(OreError::validation(format!("noise sigma {sigma} must be >= 0")));
        }
        Ok(Self { qrels, sigma, seed })
    }
}

impl Ranker for GradedOracle {
    fn score(&self, query_id: &str, doc_id: &str) -> Result<f64> {
        let grade = self.qrels.grade(query_id, doc_id) as f64;
        if self.sigma == 0.0 {
            return Ok(grade);
        }
        Ok(grade + self.sigma * pair_noise(self.seed, query_id, doc_id))
    }
}

pub type FeatureFn = dyn Fn(&str, &str) -> Result<Vec<f64>> + Send + Sync;

/// `w · features(q, d) + N(0, sigma)`.
pub struct LatentLinearOracle {
    features: Box<FeatureFn>,
    weights: Vec<f64>,
    sigma: f64,
    seed: u64,
}

impl LatentLinearOracle {
    pub fn new(features: Box<FeatureFn>, weights: Vec<f64>, sigma: f64, seed: u64) -> Result<Self> {
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(OreError::validation(format!("noise sigma {sigma} must be >= 0")));
        }
        if weights.is_empty() {
            return Err(OreError::validation("latent oracle needs at least one weight"));
        }
        Ok(Self {
            features,
            weights,
            sigma,
            seed,
        })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

impl Ranker for LatentLinearOracle {
    fn score(&self, query_id: &str, doc_id: &str) -> Result<f64> {
        let x = (self.features)(query_id, doc_id)?;
        if x.len() != self.weights.len() {
            return Err(OreError::validation(format!(
                "latent oracle has {} weights but features have length {}",
                self.weights.len(),
                x.len()
            )));
        }
        let mean: f64 = x.iter().zip(&self.weights).map(|(a, b)| a * b).sum();
        if self.sigma == 0.0 {
            return Ok(mean);
        }
        Ok(mean + self.sigma * pair_noise(self.seed, query_id, doc_id))
    }
}

/// Replays scores exported from a real ranker.
#[derive(Debug, Clone, Default)]
pub struct CachedRanker {
    scores: HashMap<(String, String), f64>,
}

impl CachedRanker {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self {
            scores: load_score_file(path)?,
        })
    }

    pub fn from_scores(scores: HashMap<(String, String), f64>) -> Self {
        Self { scores }
    }
}

impl Ranker for CachedRanker {
    fn score(&self, query_id: &str, doc_id: &str) -> Result<f64> {
        self.scores
            .get(&(query_id.to_string(), doc_id.to_string()))
            .copied()
            .ok_or_else(|| OreError::lookup(format!("no cached score for ({query_id},{doc_id})")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankerCall {
    pub query_id: String,
    pub doc_id: String,
    pub score: f64,
    pub call_index: usize,
    pub simulated_latency_ms: f64,
}

/// Per-query scoring budget.
///
/// `c` is the total number of documents a query may return, `b` the batch
/// size and `cb` the number of ranker calls (batches). At most
/// `min(c, cb * b)` documents are scored.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BudgetLedger {
    pub c: usize,
    pub b: usize,
    pub cb: usize,
    pub calls_used: usize,
    pub batch_calls: usize,
    pub per_call_latency_ms: f64,
}

impl BudgetLedger {
    pub fn new(c: usize, b: usize, cb: usize, per_call_latency_ms: f64) -> Result<Self> {
        if b == 0 {
            return Err(OreError::validation("batch size b must be at least 1"));
        }
        if c < b {
            return Err(OreError::validation(format!("budget c = {c} is smaller than batch size b = {b}")));
        }
        if cb == 0 {
            return Err(OreError::validation("ranker-call budget cb must be at least 1"));
        }
        let max_cb = c.div_ceil(b);
        if cb > max_cb {
            return Err(OreError::validation(format!(
                "cb = {cb} exceeds ceil(c/b) = {max_cb}"
            )));
        }
        if !(per_call_latency_ms >= 0.0 && per_call_latency_ms.is_finite()) {
            return Err(OreError::validation("per-call latency must be finite and >= 0"));
        }
        Ok(Self {
            c,
            b,
            cb,
            calls_used: 0,
            batch_calls: 0,
            per_call_latency_ms,
        })
    }

    /// Largest `cb` valid for the given `c` and `b`.
    pub fn full_cb(c: usize, b: usize) -> usize {
        c.div_ceil(b.max(1))
    }

    pub fn limit(&self) -> usize {
        self.c.min(self.cb * self.b)
    }

    pub fn remaining(&self) -> usize {
        self.limit() - self.calls_used
    }

    /// Size of the next batch: `min(b, remaining)`.
    pub fn next_batch_size(&self) -> usize {
        self.b.min(self.remaining())
    }

    pub fn simulated_latency_ms(&self) -> f64 {
        self.batch_calls as f64 * self.per_call_latency_ms
    }
}

/// Score one batch, charging the ledger.
pub fn score_batch<R: Ranker + ?Sized>(
    ranker: &R,
    query_id: &str,
    docs: &[&str],
    ledger: &mut BudgetLedger,
) -> Result<Vec<RankerCall>> {
    if docs.len() > ledger.b {
        return Err(OreError::validation(format!(
            "batch of {} exceeds batch size {}",
            docs.len(),
            ledger.b
        )));
    }
    if docs.len() > ledger.remaining() {
        return Err(OreError::Budget {
            requested: docs.len(),
            remaining: ledger.remaining(),
        });
    }
    if docs.is_empty() {
        return Ok(Vec::new());
    }
    let share = ledger.per_call_latency_ms / docs.len() as f64;
    let mut calls = Vec::with_capacity(docs.len());
    for (i, d) in docs.iter().enumerate() {
        let score = ranker.score(query_id, d)?;
        if !score.is_finite() {
            return Err(OreError::validation(format!("ranker returned non-finite score for ({query_id},{d})")));
        }
        calls.push(RankerCall {
            query_id: query_id.to_string(),
            doc_id: d.to_string(),
            score,
            call_index: ledger.calls_used + i,
            simulated_latency_ms: share,
        });
    }
    ledger.calls_used += docs.len();
    ledger.batch_calls += 1;
    Ok(calls)
}
