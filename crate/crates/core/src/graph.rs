//! Directed, weighted kNN graphs over documents.
//!
//! A graph either comes from a corpus similarity (BM25 doc-as-query or
//! embedding similarity) or is loaded from an edge list produced elsewhere,
//! e.g. a learned affinity model. Adjacency lists hold at most `k` entries,
//! sorted by weight descending with ties by ascending doc id.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dense::DenseScorer;
use crate::error::{OreError, Result};
use crate::lexical::InvertedIndex;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GraphKind {
    Lexical,
    Semantic,
    LearnedAffinity,
}

pub enum GraphSource<'a> {
    Lexical(&'a InvertedIndex),
    Dense(&'a DenseScorer),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AffinityGraph {
    pub k: usize,
    pub kind: GraphKind,
    adjacency: BTreeMap<String, Vec<(String, f64)>>,
}

fn edge_order(a: &(String, f64), b: &(String, f64)) -> Ordering {
    b.1.partial_cmp(&a.1)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.0.cmp(&b.0))
}

impl AffinityGraph {
    pub fn empty(kind: GraphKind) -> Self {
        Self {
            k: 0,
            kind,
            adjacency: BTreeMap::new(),
        }
    }

    /// Build from explicit adjacency lists; lists are sorted and validated.
    pub fn from_adjacency(
        kind: GraphKind,
        k: usize,
        adjacency: BTreeMap<String, Vec<(String, f64)>>,
    ) -> Result<Self> {
        let mut adjacency = adjacency;
        for (src, list) in adjacency.iter_mut() {
            if list.len() > k {
                return Err(OreError::validation(format!(
                    "{src} has {} neighbours, more than k = {k}",
                    list.len()
                )));
            }
            let mut seen = HashSet::new();
            for (dst, w) in list.iter() {
                if dst == src {
                    return Err(OreError::validation(format!("self-edge on {src}")));
                }
                if !w.is_finite() {
                    return Err(OreError::validation(format!("non-finite weight {src}->{dst}")));
                }
                if !seen.insert(dst.as_str()) {
                    return Err(OreError::validation(format!("duplicate edge {src}->{dst}")));
                }
            }
            list.sort_by(edge_order);
        }
        adjacency.retain(|_, l| !l.is_empty());
        Ok(Self { k, kind, adjacency })
    }

    pub fn build(source: GraphSource<'_>, doc_ids: &[String], k: usize) -> Result<Self> {
        if k == 0 {
            return Err(OreError::validation("graph degree k must be at least 1"));
        }
        match source {
            GraphSource::Dense(scorer) => {
                let rows = doc_ids
                    .iter()
                    .map(|d| scorer.doc_row(d))
                    .collect::<Result<Vec<_>>>()?;
                let lists: Vec<Vec<(String, f64)>> = rows
                    .par_iter()
                    .enumerate()
                    .map(|(i, &r)| {
                        let mut list = Vec::with_capacity(rows.len());
                        for (j, &o) in rows.iter().enumerate() {
                            if i != j {
                                list.push((doc_ids[j].clone(), scorer.sim_rows(r, o)?));
                            }
                        }
                        list.sort_by(edge_order);
                        list.truncate(k);
                        Ok(list)
                    })
                    .collect::<Result<_>>()?;
                let adjacency = doc_ids.iter().cloned().zip(lists).collect();
                Self::from_adjacency(GraphKind::Semantic, k, adjacency)
            }
            GraphSource::Lexical(index) => {
                let idx = doc_ids
                    .iter()
                    .map(|d| index.doc_idx(d))
                    .collect::<Result<Vec<_>>>()?;
                let lists: Vec<Vec<(String, f64)>> = idx
                    .par_iter()
                    .map(|&s| {
                        let all = index.score_all_weighted(&index.doc_as_query(s));
                        let mut list: Vec<(String, f64)> = idx
                            .iter()
                            .filter(|&&t| t != s)
                            .map(|&t| (index.doc_id(t).to_string(), all[t as usize]))
                            .collect();
                        list.sort_by(edge_order);
                        list.truncate(k);
                        list
                    })
                    .collect();
                let adjacency = doc_ids.iter().cloned().zip(lists).collect();
                Self::from_adjacency(GraphKind::Lexical, k, adjacency)
            }
        }
    }

    /// Adjacency of `doc_id`; documents outside the graph have none.
    pub fn neighbours(&self, doc_id: &str) -> &[(String, f64)] {
        self.adjacency.get(doc_id).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn nodes(&self) -> impl Iterator<Item = &str> {
        self.adjacency.keys().map(String::as_str)
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.values().map(Vec::len).sum()
    }

    pub fn edges(&self) -> impl Iterator<Item = (&str, &str, f64)> {
        self.adjacency
            .iter()
            .flat_map(|(s, l)| l.iter().map(move |(d, w)| (s.as_str(), d.as_str(), *w)))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| OreError::io(path, e))?;
        let mut out = BufWriter::new(file);
        for (s, d, w) in self.edges() {
            writeln!(out, "{s}\t{d}\t{w}").map_err(|e| OreError::io(path, e))?;
        }
        out.flush().map_err(|e| OreError::io(path, e))
    }

    /// Load an edge list. `k` becomes the largest out-degree in the file.
    pub fn load(path: impl AsRef<Path>, kind: GraphKind) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| OreError::io(path, e))?;
        let mut adjacency: BTreeMap<String, Vec<(String, f64)>> = BTreeMap::new();
        let mut seen: HashSet<(String, String)> = HashSet::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let lineno = i + 1;
            let line = line.map_err(|e| OreError::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 3 {
                return Err(OreError::parse(path, lineno, "expected `src<TAB>dst<TAB>weight`"));
            }
            let w: f64 = f[2]
                .trim()
                .parse()
                .map_err(|_| OreError::parse(path, lineno, format!("bad weight `{}`", f[2])))?;
            if f[0] == f[1] {
                return Err(OreError::parse(path, lineno, format!("self-edge on {}", f[0])));
            }
            if !w.is_finite() {
                return Err(OreError::parse(path, lineno, "non-finite weight"));
            }
            if !seen.insert((f[0].to_string(), f[1].to_string())) {
                return Err(OreError::parse(
                    path,
                    lineno,
                    format!("duplicate edge {}->{}", f[0], f[1]),
                ));
            }
            adjacency
                .entry(f[0].to_string())
                .or_default()
                .push((f[1].to_string(), w));
        }
        let k = adjacency.values().map(Vec::len).max().unwrap_or(0);
        Self::from_adjacency(kind, k, adjacency)
    }
}
