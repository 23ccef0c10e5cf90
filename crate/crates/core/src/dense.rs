//! Embedding similarity: query-document and document-document scores,
//! exact brute-force kNN, and the cheap scorer added to ranker scores.

use std::cmp::Ordering;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus_io::{EmbeddingTable, VectorTable};
use crate::error::{OreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Metric {
    #[default]
    Dot,
    Cosine,
}

impl std::str::FromStr for Metric {
    type Err = OreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dot" => Ok(Metric::Dot),
            "cosine" => Ok(Metric::Cosine),
            other => Err(OreError::validation(format!("unknown metric `{other}`"))),
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone)]
pub struct DenseScorer {
    table: Arc<EmbeddingTable>,
    metric: Metric,
    doc_norms: Vec<f64>,
}

impl DenseScorer {
    pub fn new(table: Arc<EmbeddingTable>, metric: Metric) -> Self {
        let docs = &table.docs;
        let doc_norms = (0..docs.len())
            .map(|r| dot(docs.row(r), docs.row(r)).sqrt())
            .collect();
        Self {
            table,
            metric,
            doc_norms,
        }
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn table(&self) -> &EmbeddingTable {
        &self.table
    }

    fn docs(&self) -> &VectorTable {
        &self.table.docs
    }

    pub fn doc_row(&self, doc_id: &str) -> Result<usize> {
        self.docs()
            .row_of(doc_id)
            .ok_or_else(|| OreError::lookup(format!("no embedding for document {doc_id}")))
    }

    pub fn query_vector(&self, query_id: &str) -> Result<&[f64]> {
        self.table
            .query(query_id)
            .ok_or_else(|| OreError::lookup(format!("no embedding for query {query_id}")))
    }

    fn combine(&self, raw: f64, na: f64, nb: f64, what: impl Fn() -> String) -> Result<f64> {
        match self.metric {
            Metric::Dot => Ok(raw),
            Metric::Cosine => {
                if na == 0.0 || nb == 0.0 {
                    Err(OreError::validation(format!(
                        "cosine similarity undefined for zero vector ({})",
                        what()
                    )))
                } else {
                    Ok((raw / (na * nb)).clamp(-1.0, 1.0))
                }
            }
        }
    }

    /// Similarity between a raw query vector and a document row.
    pub fn sim_vec_row(&self, query: &[f64], row: usize) -> Result<f64> {
        let d = self.docs().row(row);
        let nq = dot(query, query).sqrt();
        self.combine(dot(query, d), nq, self.doc_norms[row], || {
            self.docs().ids()[row].clone()
        })
    }

    pub fn sim_rows(&self, a: usize, b: usize) -> Result<f64> {
        let docs = self.docs();
        self.combine(
            dot(docs.row(a), docs.row(b)),
            self.doc_norms[a],
            self.doc_norms[b],
            || format!("{} / {}", docs.ids()[a], docs.ids()[b]),
        )
    }

    pub fn sim_qd(&self, query_id: &str, doc_id: &str) -> Result<f64> {
        let q = self.query_vector(query_id)?;
        self.sim_vec_row(q, self.doc_row(doc_id)?)
    }

    pub fn sim_dd(&self, a: &str, b: &str) -> Result<f64> {
        self.sim_rows(self.doc_row(a)?, self.doc_row(b)?)
    }

    /// Similarity of the query to every document row, in row order.
    pub fn sim_all(&self, query_id: &str) -> Result<Vec<f64>> {
        let q = self.query_vector(query_id)?;
        (0..self.docs().len())
            .map(|r| self.sim_vec_row(q, r))
            .collect()
    }

    /// Exact top-k most similar documents to `doc_id`, excluding itself.
    pub fn knn(&self, doc_id: &str, k: usize) -> Result<Vec<(String, f64)>> {
        let row = self.doc_row(doc_id)?;
        Ok(self
            .knn_row(row, k)?
            .into_iter()
            .map(|(r, s)| (self.docs().ids()[r].clone(), s))
            .collect())
    }

    pub fn knn_row(&self, row: usize, k: usize) -> Result<Vec<(usize, f64)>> {
        if k == 0 {
            return Err(OreError::validation("knn requires k >= 1"));
        }
        let ids = self.docs().ids();
        let mut scored = Vec::with_capacity(self.docs().len());
        for other in 0..self.docs().len() {
            if other != row {
                scored.push((other, self.sim_rows(row, other)?));
            }
        }
        scored.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap_or(Ordering::Equal)
                .then_with(|| ids[a.0].cmp(&ids[b.0]))
        });
        scored.truncate(k);
        Ok(scored)
    }

    /// kNN for every document row, parallel over sources.
    pub fn knn_all(&self, k: usize) -> Result<Vec<Vec<(usize, f64)>>> {
        (0..self.docs().len())
            .into_par_iter()
            .map(|r| self.knn_row(r, k))
            .collect()
    }
}

/// The inexpensive scorer whose output is added to expensive ranker scores.
#[derive(Debug, Clone)]
pub enum Psi {
    /// Use the main embedding table.
    Main(DenseScorer),
    /// A separate embedding table.
    Separate(DenseScorer),
    /// No cheap scorer; contributes 0.
    Disabled,
}

impl Psi {
    pub fn scorer(&self) -> Option<&DenseScorer> {
        match self {
            Psi::Main(s) | Psi::Separate(s) => Some(s),
            Psi::Disabled => None,
        }
    }

    pub fn psi(&self, query_id: &str, doc_id: &str) -> Result<f64> {
        match self.scorer() {
            Some(s) => s.sim_qd(query_id, doc_id),
            None => Ok(0.0),
        }
    }
}
