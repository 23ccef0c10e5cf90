//! Per-document features for relevance estimation.
//!
//! Hybrid setup, in order:
//!   0. BM25(q, d)
//!   1. dense similarity(q, d)
//!   2. BM25 of d against the RM3-expanded query
//!   3. mean over the top scored set S of `score(d') * sim(d, d')`
//!
//! Adaptive setup, in order:
//!   0. BM25(q, d)
//!   1. mean graph edge weight from d to members of S among its neighbours
//!   2. mean stored score of members of S among d's neighbours
//!
//! Features that cannot be computed (no S yet, missing embedding, empty
//! neighbourhood intersection) are 0 with their mask bit cleared. Before
//! regression every available feature is min-max scaled with a running
//! per-query normalizer.

use std::cmp::Ordering;

use serde::Serialize;

use crate::dense::DenseScorer;
use crate::graph::AffinityGraph;
use crate::lexical::{ExpandedQuery, InvertedIndex};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Setup {
    Hybrid,
    Adaptive,
}

impl Setup {
    pub fn dim(self) -> usize {
        match self {
            Setup::Hybrid => 4,
            Setup::Adaptive => 3,
        }
    }

    pub fn feature_names(self) -> &'static [&'static str] {
        match self {
            Setup::Hybrid => &["bm25", "dense", "rm3", "set_sim"],
            Setup::Adaptive => &["bm25", "set_affinity", "set_score"],
        }
    }
}

/// A value that may be unavailable.
pub type Masked = (f64, bool);

const MISSING: Masked = (0.0, false);

/// Unnormalized features of one document.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RawFeatures {
    pub values: Vec<f64>,
    pub mask: Vec<bool>,
}

impl RawFeatures {
    pub fn from_masked(parts: &[Masked]) -> Self {
        Self {
            values: parts.iter().map(|&(v, m)| if m { v } else { 0.0 }).collect(),
            mask: parts.iter().map(|&(_, m)| m).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FeatureVector {
    pub setup: Setup,
    pub values: Vec<f64>,
    pub mask: Vec<bool>,
}

impl FeatureVector {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn zeros(setup: Setup) -> Self {
        Self {
            setup,
            values: vec![0.0; setup.dim()],
            mask: vec![false; setup.dim()],
        }
    }
}

/// Running per-feature min/max. Masked values are never observed.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    min: Vec<f64>,
    max: Vec<f64>,
}

impl Normalizer {
    pub fn new(dim: usize) -> Self {
        Self {
            min: vec![f64::INFINITY; dim],
            max: vec![f64::NEG_INFINITY; dim],
        }
    }

    pub fn observe(&mut self, raw: &RawFeatures) {
        for (i, (&v, &m)) in raw.values.iter().zip(&raw.mask).enumerate() {
            if m && v.is_finite() {
                self.min[i] = self.min[i].min(v);
                self.max[i] = self.max[i].max(v);
            }
        }
    }

    pub fn range(&self, feature: usize) -> Option<(f64, f64)> {
        (self.min[feature] <= self.max[feature]).then(|| (self.min[feature], self.max[feature]))
    }

    /// Scale one value; a constant feature (min == max) maps to 0.
    pub fn scale(&self, feature: usize, value: f64) -> f64 {
        match self.range(feature) {
            Some((lo, hi)) if hi > lo => (value - lo) / (hi - lo),
            _ => 0.0,
        }
    }
}

pub fn assemble(setup: Setup, raw: &RawFeatures, normalizer: &Normalizer) -> FeatureVector {
    let values = raw
        .values
        .iter()
        .zip(&raw.mask)
        .enumerate()
        .map(|(i, (&v, &m))| if m { normalizer.scale(i, v) } else { 0.0 })
        .collect();
    FeatureVector {
        setup,
        values,
        mask: raw.mask.clone(),
    }
}

/// Observe every raw vector, then scale each against the updated ranges.
pub fn assemble_batch(setup: Setup, raws: &[RawFeatures], normalizer: &mut Normalizer) -> Vec<FeatureVector> {
    for r in raws {
        normalizer.observe(r);
    }
    raws.iter().map(|r| assemble(setup, r, normalizer)).collect()
}

/// The top-`s` ranker-scored documents, best first, ties by ascending key.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSet<K> {
    entries: Vec<(K, f64)>,
    capacity: usize,
}

impl<K: Ord + Clone> ScoredSet<K> {
    pub fn top(scored: impl IntoIterator<Item = (K, f64)>, capacity: usize) -> Self {
        let mut entries: Vec<(K, f64)> = scored.into_iter().collect();
        entries.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap_or(Ordering::Equal)
                .then_with(|| a.0.cmp(&b.0))
        });
        entries.truncate(capacity);
        Self { entries, capacity }
    }

    pub fn entries(&self) -> &[(K, f64)] {
        &self.entries
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn score_of(&self, key: &K) -> Option<f64> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, s)| *s)
    }
}

/// Mean edge weight and mean stored score over the members of S that appear
/// in `neighbours`. `None` when the intersection is empty.
pub fn neighbourhood_means<K>(
    neighbours: &[(K, f64)],
    score_in_set: impl Fn(&K) -> Option<f64>,
) -> Option<(f64, f64)> {
    let mut n = 0usize;
    let mut weight = 0.0;
    let mut score = 0.0;
    for (k, w) in neighbours {
        if let Some(s) = score_in_set(k) {
            n += 1;
            weight += w;
            score += s;
        }
    }
    (n > 0).then(|| (weight / n as f64, score / n as f64))
}

/// Query-document affinities `(BM25, dense)`; each is masked when the
/// document is unknown to that scorer.
pub fn q2daff_hybrid<S: AsRef<str>>(
    lex: &InvertedIndex,
    dense: &DenseScorer,
    query_tokens: &[S],
    query_id: &str,
    doc_id: &str,
) -> (Masked, Masked) {
    let x1 = lex
        .bm25_qd(query_tokens, doc_id)
        .map(|v| (v, true))
        .unwrap_or(MISSING);
    let x2 = dense
        .sim_qd(query_id, doc_id)
        .map(|v| (v, true))
        .unwrap_or(MISSING);
    (x1, x2)
}

/// `(RM3 score, score-weighted mean similarity to S)`.
pub fn d2setaff_hybrid(
    lex: &InvertedIndex,
    dense: &DenseScorer,
    expanded: Option<&ExpandedQuery>,
    doc_id: &str,
    set: &ScoredSet<String>,
) -> (Masked, Masked) {
    let x3 = expanded
        .and_then(|e| lex.bm25_expanded(e, doc_id).ok())
        .map(|v| (v, true))
        .unwrap_or(MISSING);
    let set_term = if set.is_empty() {
        MISSING
    } else {
        let mut total = 0.0;
        let mut ok = true;
        for (other, score) in set.entries() {
            match dense.sim_dd(doc_id, other) {
                Ok(sim) => total += score * sim,
                Err(_) => {
                    ok = false;
                    break;
                }
            }
        }
        if ok {
            (total / set.len() as f64, true)
        } else {
            MISSING
        }
    };
    (x3, set_term)
}

/// Mean edge weight from `doc_id` to members of S among its neighbours.
pub fn d2setaff_adaptive(graph: &AffinityGraph, doc_id: &str, set: &ScoredSet<String>) -> Masked {
    neighbourhood_means(graph.neighbours(doc_id), |k| set.score_of(k))
        .map(|(w, _)| (w, true))
        .unwrap_or(MISSING)
}

/// Mean stored score of members of S among the neighbours of `doc_id`.
pub fn x7(doc_id: &str, set: &ScoredSet<String>, graph: &AffinityGraph) -> Masked {
    neighbourhood_means(graph.neighbours(doc_id), |k| set.score_of(k))
        .map(|(_, s)| (s, true))
        .unwrap_or(MISSING)
}
