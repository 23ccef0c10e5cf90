//! Inverted index with Okapi BM25 scoring and RM3 query expansion.
//!
//! BM25 uses the Lucene idf `ln((N - df + 0.5) / (df + 0.5) + 1)` and the
//! usual saturation `tf (k1 + 1) / (tf + k1 (1 - b + b dl / avgdl))`. Query
//! terms are weighted by their multiplicity, so a document scored "as a query"
//! against another weights each distinct term by its tf.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus_io::Document;
use crate::error::{OreError, Result};
use crate::text::tokenize;

const MAGIC: &[u8; 8] = b"OREIDX01";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 0.9, b: 0.4 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rm3Params {
    pub fb_docs: usize,
    pub fb_terms: usize,
    /// Weight of the original query distribution, in `[0, 1]`.
    pub orig_weight: f64,
}

impl Default for Rm3Params {
    fn default() -> Self {
        Self {
            fb_docs: 3,
            fb_terms: 10,
            orig_weight: 0.5,
        }
    }
}

pub type TermId = u32;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InvertedIndex {
    params: Bm25Params,
    doc_ids: Vec<String>,
    doc_lengths: Vec<u32>,
    avg_doc_len: f64,
    terms: BTreeMap<String, TermId>,
    /// Indexed by term id; each list sorted by document index.
    postings: Vec<Vec<(u32, u32)>>,
    /// Indexed by document index; each vector sorted by term id.
    doc_terms: Vec<Vec<(TermId, u32)>>,
    #[serde(skip)]
    doc_index: HashMap<String, u32>,
    #[serde(skip)]
    term_names: Vec<String>,
}

/// A weighted term distribution produced by RM3.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpandedQuery {
    /// Sorted by term.
    pub terms: Vec<(String, f64)>,
}

impl ExpandedQuery {
    pub fn weight(&self, term: &str) -> f64 {
        self.terms
            .binary_search_by(|(t, _)| t.as_str().cmp(term))
            .map(|i| self.terms[i].1)
            .unwrap_or(0.0)
    }

    pub fn total_weight(&self) -> f64 {
        self.terms.iter().map(|(_, w)| w).sum()
    }
}

fn by_score_then_id(ids: &[String]) -> impl Fn(&(u32, f64), &(u32, f64)) -> Ordering + '_ {
    move |a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(Ordering::Equal)
            .then_with(|| ids[a.0 as usize].cmp(&ids[b.0 as usize]))
    }
}

impl InvertedIndex {
    pub fn build(corpus: &[Document], params: Bm25Params) -> Result<Self> {
        if corpus.is_empty() {
            return Err(OreError::validation("cannot index an empty corpus"));
        }
        // Internal document indices follow doc id order, so comparing indices
        // is the same as comparing ids.
        let mut sorted: Vec<&Document> = corpus.iter().collect();
        sorted.sort_by(|a, b| a.doc_id.cmp(&b.doc_id));
        let mut doc_index = HashMap::with_capacity(corpus.len());
        let mut counted: Vec<BTreeMap<String, u32>> = Vec::with_capacity(corpus.len());
        let mut doc_lengths = Vec::with_capacity(corpus.len());
        let mut vocab: BTreeMap<String, TermId> = BTreeMap::new();
        for (i, doc) in sorted.iter().enumerate() {
            if doc_index.insert(doc.doc_id.clone(), i as u32).is_some() {
                return Err(OreError::validation(format!("duplicate doc_id {}", doc.doc_id)));
            }
            let tokens = tokenize(&doc.text);
            doc_lengths.push(tokens.len() as u32);
            let mut tf: BTreeMap<String, u32> = BTreeMap::new();
            for t in tokens {
                *tf.entry(t).or_insert(0) += 1;
            }
            for t in tf.keys() {
                if !vocab.contains_key(t) {
                    vocab.insert(t.clone(), 0);
                }
            }
            counted.push(tf);
        }
        // Term ids follow lexical order as well.
        for (id, v) in vocab.values_mut().enumerate() {
            *v = id as TermId;
        }
        let mut postings = vec![Vec::new(); vocab.len()];
        let mut doc_terms = Vec::with_capacity(corpus.len());
        for (i, tf) in counted.into_iter().enumerate() {
            let mut row = Vec::with_capacity(tf.len());
            for (t, n) in tf {
                let id = vocab[&t];
                postings[id as usize].push((i as u32, n));
                row.push((id, n));
            }
            row.sort_unstable();
            doc_terms.push(row);
        }
        let total: u64 = doc_lengths.iter().map(|&l| l as u64).sum();
        let avg_doc_len = total as f64 / corpus.len() as f64;
        let term_names = vocab.keys().cloned().collect();
        Ok(Self {
            params,
            term_names,
            doc_ids: sorted.iter().map(|d| d.doc_id.clone()).collect(),
            doc_lengths,
            avg_doc_len,
            terms: vocab,
            postings,
            doc_terms,
            doc_index,
        })
    }

    pub fn params(&self) -> Bm25Params {
        self.params
    }

    pub fn set_params(&mut self, params: Bm25Params) {
        self.params = params;
    }

    pub fn n_docs(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn avg_doc_len(&self) -> f64 {
        self.avg_doc_len
    }

    pub fn doc_ids(&self) -> &[String] {
        &self.doc_ids
    }

    pub fn doc_idx(&self, doc_id: &str) -> Result<u32> {
        self.doc_index
            .get(doc_id)
            .copied()
            .ok_or_else(|| OreError::lookup(format!("document {doc_id} is not indexed")))
    }

    pub fn doc_id(&self, idx: u32) -> &str {
        &self.doc_ids[idx as usize]
    }

    pub fn doc_len(&self, doc_id: &str) -> Result<u32> {
        Ok(self.doc_lengths[self.doc_idx(doc_id)? as usize])
    }

    pub fn term_id(&self, term: &str) -> Option<TermId> {
        self.terms.get(term).copied()
    }

    pub fn doc_freq(&self, term: &str) -> usize {
        self.term_id(term)
            .map(|t| self.postings[t as usize].len())
            .unwrap_or(0)
    }

    /// Postings of `term` as `(doc_id, tf)` pairs in doc id order.
    pub fn postings(&self, term: &str) -> Vec<(&str, u32)> {
        self.term_id(term)
            .map(|t| {
                self.postings[t as usize]
                    .iter()
                    .map(|&(d, tf)| (self.doc_id(d), tf))
                    .collect()
            })
            .unwrap_or_default()
    }

    pub fn term_freq(&self, term: TermId, doc: u32) -> u32 {
        let row = &self.doc_terms[doc as usize];
        row.binary_search_by_key(&term, |&(t, _)| t)
            .map(|i| row[i].1)
            .unwrap_or(0)
    }

    fn idf(&self, term: TermId) -> f64 {
        let n = self.n_docs() as f64;
        let df = self.postings[term as usize].len() as f64;
        ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
    }

    fn term_score(&self, term: TermId, tf: u32, doc: u32) -> f64 {
        if tf == 0 {
            return 0.0;
        }
        let Bm25Params { k1, b } = self.params;
        let tf = tf as f64;
        let dl = self.doc_lengths[doc as usize] as f64;
        let norm = k1 * (1.0 - b + b * dl / self.avg_doc_len);
        self.idf(term) * tf * (k1 + 1.0) / (tf + norm)
    }

    /// Resolve query tokens into `(term id, multiplicity)`; unknown terms drop out.
    pub fn weigh_tokens<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<(TermId, f64)> {
        let mut counts: BTreeMap<TermId, f64> = BTreeMap::new();
        for t in tokens {
            if let Some(id) = self.term_id(t.as_ref()) {
                *counts.entry(id).or_insert(0.0) += 1.0;
            }
        }
        counts.into_iter().collect()
    }

    pub fn weigh_expanded(&self, expanded: &ExpandedQuery) -> Vec<(TermId, f64)> {
        expanded
            .terms
            .iter()
            .filter_map(|(t, w)| self.term_id(t).map(|id| (id, *w)))
            .collect()
    }

    /// Weighted BM25 of one document by internal index.
    pub fn score_weighted(&self, weights: &[(TermId, f64)], doc: u32) -> f64 {
        weights
            .iter()
            .map(|&(t, w)| w * self.term_score(t, self.term_freq(t, doc), doc))
            .sum()
    }

    /// Weighted BM25 for every document, accumulated over postings.
    pub fn score_all_weighted(&self, weights: &[(TermId, f64)]) -> Vec<f64> {
        let mut acc = vec![0.0; self.n_docs()];
        for &(t, w) in weights {
            if w == 0.0 {
                continue;
            }
            for &(d, tf) in &self.postings[t as usize] {
                acc[d as usize] += w * self.term_score(t, tf, d);
            }
        }
        acc
    }

    /// Top `depth` documents with positive score, best first, ties by doc id.
    pub fn search_weighted(&self, weights: &[(TermId, f64)], depth: usize) -> Vec<(u32, f64)> {
        let scores = self.score_all_weighted(weights);
        let mut hits: Vec<(u32, f64)> = scores
            .into_iter()
            .enumerate()
            .filter(|(_, s)| *s > 0.0)
            .map(|(d, s)| (d as u32, s))
            .collect();
        hits.sort_by(by_score_then_id(&self.doc_ids));
        hits.truncate(depth);
        hits
    }

    pub fn search<S: AsRef<str>>(&self, query: &[S], depth: usize) -> Vec<(u32, f64)> {
        self.search_weighted(&self.weigh_tokens(query), depth)
    }

    pub fn bm25_qd<S: AsRef<str>>(&self, query: &[S], doc_id: &str) -> Result<f64> {
        let doc = self.doc_idx(doc_id)?;
        Ok(self.score_weighted(&self.weigh_tokens(query), doc))
    }

    /// Score `target` using the terms of `source` as a tf-weighted query.
    pub fn bm25_dd(&self, source: &str, target: &str) -> Result<f64> {
        let s = self.doc_idx(source)?;
        let t = self.doc_idx(target)?;
        Ok(self.bm25_dd_idx(s, t))
    }

    pub fn doc_as_query(&self, doc: u32) -> Vec<(TermId, f64)> {
        self.doc_terms[doc as usize]
            .iter()
            .map(|&(t, tf)| (t, tf as f64))
            .collect()
    }

    pub fn bm25_dd_idx(&self, source: u32, target: u32) -> f64 {
        self.score_weighted(&self.doc_as_query(source), target)
    }

    pub fn bm25_expanded(&self, expanded: &ExpandedQuery, doc_id: &str) -> Result<f64> {
        let doc = self.doc_idx(doc_id)?;
        Ok(self.score_weighted(&self.weigh_expanded(expanded), doc))
    }

    /// RM3: interpolate the query's maximum-likelihood term distribution with
    /// a relevance model estimated from the feedback documents (each weighted
    /// equally), truncated to its `fb_terms` heaviest terms.
    pub fn rm3_expand<S: AsRef<str>>(
        &self,
        query: &[S],
        feedback: &[&str],
        fb_terms: usize,
        orig_weight: f64,
    ) -> Result<ExpandedQuery> {
        let docs = feedback
            .iter()
            .map(|d| self.doc_idx(d))
            .collect::<Result<Vec<_>>>()?;
        self.rm3_expand_idx(query, &docs, fb_terms, orig_weight)
    }

    pub fn rm3_expand_idx<S: AsRef<str>>(
        &self,
        query: &[S],
        feedback: &[u32],
        fb_terms: usize,
        orig_weight: f64,
    ) -> Result<ExpandedQuery> {
        if feedback.is_empty() {
            return Err(OreError::validation("RM3 needs at least one feedback document"));
        }
        if !(0.0..=1.0).contains(&orig_weight) {
            return Err(OreError::validation(format!(
                "RM3 original-query weight {orig_weight} outside [0, 1]"
            )));
        }
        if fb_terms == 0 {
            return Err(OreError::validation("RM3 fb_terms must be at least 1"));
        }

        let mut relevance: HashMap<TermId, f64> = HashMap::new();
        let share = 1.0 / feedback.len() as f64;
        for &d in feedback {
            let len = self.doc_lengths[d as usize] as f64;
            if len == 0.0 {
                continue;
            }
            for &(t, tf) in &self.doc_terms[d as usize] {
                *relevance.entry(t).or_insert(0.0) += share * tf as f64 / len;
            }
        }
        let mut model: Vec<(&str, f64)> = relevance
            .into_iter()
            .map(|(t, w)| (self.term_name(t), w))
            .collect();
        model.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap_or(Ordering::Equal)
                .then_with(|| a.0.cmp(b.0))
        });
        model.truncate(fb_terms);
        let mass: f64 = model.iter().map(|(_, w)| w).sum();

        let mut query_mle: BTreeMap<String, f64> = BTreeMap::new();
        for t in query {
            *query_mle.entry(t.as_ref().to_string()).or_insert(0.0) += 1.0;
        }
        let qlen: f64 = query_mle.values().sum();
        // An empty query has no distribution to interpolate with.
        let lambda = if qlen > 0.0 { orig_weight } else { 0.0 };

        let mut out: BTreeMap<String, f64> = BTreeMap::new();
        for (t, c) in &query_mle {
            *out.entry(t.clone()).or_insert(0.0) += lambda * c / qlen;
        }
        if mass > 0.0 {
            for (t, w) in model {
                *out.entry(t.to_string()).or_insert(0.0) += (1.0 - lambda) * w / mass;
            }
        }
        Ok(ExpandedQuery {
            terms: out.into_iter().filter(|(_, w)| *w > 0.0).collect(),
        })
    }

    pub fn term_name(&self, id: TermId) -> &str {
        &self.term_names[id as usize]
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut file = std::fs::File::create(path).map_err(|e| OreError::io(path, e))?;
        file.write_all(&self.to_bytes()).map_err(|e| OreError::io(path, e))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        out.extend(bincode::serialize(self).expect("index serializes"));
        out
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| OreError::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            OreError::Validation(m) => OreError::parse(path, 0, m),
            other => other,
        })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(OreError::validation("not an index file (bad magic header)"));
        }
        let mut index: InvertedIndex = bincode::deserialize(&bytes[MAGIC.len()..])
            .map_err(|e| OreError::validation(format!("corrupt index: {e}")))?;
        index.doc_index = index
            .doc_ids
            .iter()
            .enumerate()
            .map(|(i, d)| (d.clone(), i as u32))
            .collect();
        index.term_names = index.terms.keys().cloned().collect();
        Ok(index)
    }
}
