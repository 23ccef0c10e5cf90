//! Synthetic corpora with planted relevant clusters.
//!
//! Documents are partitioned into clusters that share topic terms and an
//! embedding centroid. Each query owns `clusters_per_query` clusters; only
//! the visible share of each cluster carries query terms, so the remaining
//! members are reachable through the affinity graph and not through BM25.
//! Non-relevant documents that carry query terms act as hard negatives.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::corpus_io::{write_corpus, write_qrels, write_queries, write_vectors, Document, Qrels, Query, VectorTable};
use crate::dense::dot;
use crate::error::{OreError, Result};
use crate::graph::{AffinityGraph, GraphKind};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SynthSpec {
    pub n_docs: usize,
    pub n_queries: usize,
    pub clusters_per_query: usize,
    pub cluster_size: usize,
    /// Share of each relevant cluster that contains query terms.
    pub visible_fraction: f64,
    /// Background vocabulary size.
    pub vocab_size: usize,
    pub embedding_dim: usize,
    pub seed: u64,
    pub query_terms: usize,
    pub topic_terms: usize,
    /// Mean number of background tokens per document.
    pub doc_len: usize,
    /// Per query: non-relevant documents containing every query term.
    pub strong_negatives: usize,
    /// Per query: non-relevant documents missing one query term.
    pub weak_negatives: usize,
    /// Chance that a visible document misses one query term.
    pub partial_visibility: f64,
    /// Standard deviation of per-coordinate embedding jitter around the centroid.
    pub embedding_noise: f64,
    /// Weight of the relevant centroids in the query embedding, in `[0, 1]`.
    pub query_alignment: f64,
    /// Out-degree of the affinity graph.
    pub graph_k: usize,
    /// Clusters sharing a topic direction in embedding space.
    pub clusters_per_topic: usize,
    /// Length of each cluster's offset from its topic direction.
    pub topic_spread: f64,
    /// Share of the hard negatives drawn from the relevant clusters' topic siblings.
    pub sibling_negatives: f64,
    /// Weight of a direction shared by every embedding.
    pub anisotropy: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_docs: 2000,
            n_queries: 50,
            clusters_per_query: 2,
            cluster_size: 5,
            visible_fraction: 0.2,
            vocab_size: 3000,
            embedding_dim: 32,
            seed: 0,
            query_terms: 3,
            topic_terms: 8,
            doc_len: 24,
            strong_negatives: 5,
            weak_negatives: 60,
            partial_visibility: 0.35,
            embedding_noise: 0.12,
            query_alignment: 0.6,
            graph_k: 6,
            clusters_per_topic: 2,
            topic_spread: 0.5,
            sibling_negatives: 0.4,
            anisotropy: 0.5,
        }
    }
}

impl SynthSpec {
    pub fn n_clusters(&self) -> usize {
        self.n_docs / self.cluster_size.max(1)
    }

    /// Number of query-term carrying documents per relevant cluster.
    pub fn visible_per_cluster(&self) -> usize {
        ((self.visible_fraction * self.cluster_size as f64).round() as usize).clamp(1, self.cluster_size)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(OreError::validation(m));
        if self.cluster_size < 2 {
            return fail(format!("cluster size must be >= 2, got {}", self.cluster_size));
        }
        if self.cluster_size > self.n_docs {
            return fail(format!("cluster size {} exceeds n_docs {}", self.cluster_size, self.n_docs));
        }
        if !(self.visible_fraction > 0.0 && self.visible_fraction <= 1.0) {
            return fail(format!("visible fraction {} outside (0, 1]", self.visible_fraction));
        }
        if self.clusters_per_query == 0 || self.n_queries * self.clusters_per_query > self.n_clusters() {
            return fail(format!(
                "{} queries x {} clusters do not fit in {} clusters",
                self.n_queries,
                self.clusters_per_query,
                self.n_clusters()
            ));
        }
        if self.vocab_size == 0 || self.embedding_dim == 0 || self.query_terms == 0 || self.topic_terms == 0 {
            return fail("vocab, embedding dim, query terms and topic terms must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.partial_visibility) || !(0.0..=1.0).contains(&self.query_alignment) {
            return fail("partial visibility and query alignment must lie in [0, 1]".into());
        }
        if self.graph_k == 0 {
            return fail("graph degree must be >= 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub spec: SynthSpec,
    pub corpus: Vec<Document>,
    pub queries: Vec<Query>,
    pub qrels: Qrels,
    pub doc_vectors: VectorTable,
    pub query_vectors: VectorTable,
    pub graph: AffinityGraph,
    /// Members of every cluster, in generation order.
    pub clusters: Vec<Vec<String>>,
    /// Query id to its relevant cluster indices.
    pub relevant_clusters: BTreeMap<String, Vec<usize>>,
    /// Query id to the relevant documents that carry query terms.
    pub visible: BTreeMap<String, Vec<String>>,
}

pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const QUERIES_FILE: &str = "queries.jsonl";
pub const QRELS_FILE: &str = "qrels.txt";
pub const DOC_VECTORS_FILE: &str = "doc_vectors.tsv";
pub const QUERY_VECTORS_FILE: &str = "query_vectors.tsv";
pub const GRAPH_FILE: &str = "graph.tsv";

impl SynthData {
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| OreError::io(dir, e))?;
        write_corpus(&self.corpus, dir.join(CORPUS_FILE))?;
        write_queries(&self.queries, dir.join(QUERIES_FILE))?;
        write_qrels(&self.qrels, dir.join(QRELS_FILE))?;
        write_vectors(&self.doc_vectors, dir.join(DOC_VECTORS_FILE))?;
        write_vectors(&self.query_vectors, dir.join(QUERY_VECTORS_FILE))?;
        self.graph.save(dir.join(GRAPH_FILE))
    }
}

fn unit(v: &mut [f64]) {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

struct DocDraft {
    tokens: Vec<String>,
}

pub fn generate(spec: &SynthSpec) -> Result<SynthData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let ids: Vec<String> = (0..spec.n_docs).map(|i| format!("d{i:05}")).collect();

    let mut order: Vec<usize> = (0..spec.n_docs).collect();
    order.shuffle(&mut rng);
    let n_clusters = spec.n_clusters();
    let mut clusters: Vec<Vec<usize>> = order.chunks(spec.cluster_size).take(n_clusters).map(|c| c.to_vec()).collect();
    for (i, &d) in order[n_clusters * spec.cluster_size..].iter().enumerate() {
        clusters[i % n_clusters].push(d);
    }
    let mut cluster_of = vec![0usize; spec.n_docs];
    for (ci, members) in clusters.iter().enumerate() {
        for &d in members {
            cluster_of[d] = ci;
        }
    }

    let mut drafts: Vec<DocDraft> = Vec::with_capacity(spec.n_docs);
    for d in 0..spec.n_docs {
        let ci = cluster_of[d];
        let len = rng.random_range(spec.doc_len / 2..=spec.doc_len + spec.doc_len / 2);
        let mut tokens: Vec<String> = (0..len).map(|_| format!("w{}", rng.random_range(0..spec.vocab_size))).collect();
        let topical = rng.random_range(spec.topic_terms / 2..=spec.topic_terms);
        for _ in 0..topical {
            tokens.push(format!("c{ci}t{}", rng.random_range(0..spec.topic_terms)));
        }
        drafts.push(DocDraft { tokens });
    }

    let per_topic = spec.clusters_per_topic.max(1);
    let topics: Vec<Vec<f64>> = (0..n_clusters.div_ceil(per_topic))
        .map(|_| {
            let mut t = gaussian(&mut rng, spec.embedding_dim);
            unit(&mut t);
            t
        })
        .collect();
    let centroids: Vec<Vec<f64>> = (0..n_clusters)
        .map(|ci| {
            if per_topic == 1 {
                return topics[ci].clone();
            }
            let mut offset = gaussian(&mut rng, spec.embedding_dim);
            unit(&mut offset);
            let mut c: Vec<f64> = topics[ci / per_topic]
                .iter()
                .zip(&offset)
                .map(|(t, o)| t + spec.topic_spread * o)
                .collect();
            unit(&mut c);
            c
        })
        .collect();
    let mut shared = gaussian(&mut rng, spec.embedding_dim);
    unit(&mut shared);
    let skew = |v: &mut Vec<f64>| {
        unit(v);
        for (x, s) in v.iter_mut().zip(&shared) {
            *x += spec.anisotropy * s;
        }
        unit(v);
    };
    let mut doc_vectors = VectorTable::new(spec.embedding_dim)?;
    for (d, id) in ids.iter().enumerate() {
        let noise = gaussian(&mut rng, spec.embedding_dim);
        let mut v: Vec<f64> = centroids[cluster_of[d]]
            .iter()
            .zip(&noise)
            .map(|(c, n)| c + spec.embedding_noise * n)
            .collect();
        skew(&mut v);
        doc_vectors.insert(id, &v)?;
    }

    let mut cluster_pool: Vec<usize> = (0..n_clusters).collect();
    cluster_pool.shuffle(&mut rng);
    let mut queries = Vec::with_capacity(spec.n_queries);
    let mut query_vectors = VectorTable::new(spec.embedding_dim)?;
    let mut qrels = Qrels::new();
    let mut relevant_clusters = BTreeMap::new();
    let mut visible_docs = BTreeMap::new();
    let n_visible = spec.visible_per_cluster();

    for qi in 0..spec.n_queries {
        let qid = format!("q{qi:03}");
        let terms: Vec<String> = (0..spec.query_terms).map(|j| format!("q{qi}t{j}")).collect();
        let owned: Vec<usize> = cluster_pool[qi * spec.clusters_per_query..(qi + 1) * spec.clusters_per_query].to_vec();
        let relevant: BTreeSet<usize> = owned.iter().flat_map(|&c| clusters[c].iter().copied()).collect();

        let mut visible = Vec::new();
        for &c in &owned {
            for (pos, &d) in clusters[c].iter().enumerate() {
                qrels.insert(&qid, &ids[d], rng.random_range(1..=3))?;
                if pos < n_visible {
                    visible.push(ids[d].clone());
                    let drop = if terms.len() > 1 && rng.random_bool(spec.partial_visibility) {
                        Some(rng.random_range(0..terms.len()))
                    } else {
                        None
                    };
                    for (j, t) in terms.iter().enumerate() {
                        if Some(j) != drop {
                            for _ in 0..rng.random_range(1..=2) {
                                drafts[d].tokens.push(t.clone());
                            }
                        }
                    }
                }
            }
        }

        let n_neg = spec.strong_negatives + spec.weak_negatives;
        let topics_owned: BTreeSet<usize> = owned.iter().map(|c| c / per_topic).collect();
        let mut siblings: Vec<usize> = (0..spec.n_docs)
            .filter(|d| !relevant.contains(d) && topics_owned.contains(&(cluster_of[*d] / per_topic)))
            .collect();
        siblings.shuffle(&mut rng);
        siblings.truncate(((spec.sibling_negatives * n_neg as f64).round() as usize).min(n_neg));
        let taken: BTreeSet<usize> = siblings.iter().copied().collect();
        let others: Vec<usize> = (0..spec.n_docs)
            .filter(|d| !relevant.contains(d) && !taken.contains(d))
            .collect();
        let mut negatives = siblings;
        negatives.extend(others.choose_multiple(&mut rng, n_neg - negatives.len()).copied());
        negatives.shuffle(&mut rng);
        for (n, &d) in negatives.iter().enumerate() {
            let drop = if n >= spec.strong_negatives && terms.len() > 1 {
                Some(rng.random_range(0..terms.len()))
            } else {
                None
            };
            for (j, t) in terms.iter().enumerate() {
                if Some(j) != drop {
                    for _ in 0..rng.random_range(1..=2) {
                        drafts[d].tokens.push(t.clone());
                    }
                }
            }
            qrels.insert(&qid, &ids[d], 0)?;
        }

        let mut target = vec![0.0; spec.embedding_dim];
        for &c in &owned {
            for (t, x) in target.iter_mut().zip(&centroids[c]) {
                *t += x;
            }
        }
        unit(&mut target);
        let mut other = gaussian(&mut rng, spec.embedding_dim);
        unit(&mut other);
        let mut qv: Vec<f64> = target
            .iter()
            .zip(&other)
            .map(|(t, o)| spec.query_alignment * t + (1.0 - spec.query_alignment) * o)
            .collect();
        skew(&mut qv);
        query_vectors.insert(&qid, &qv)?;

        queries.push(Query {
            query_id: qid.clone(),
            text: terms.join(" "),
        });
        relevant_clusters.insert(qid.clone(), owned);
        visible_docs.insert(qid, visible);
    }

    let corpus: Vec<Document> = drafts
        .into_iter()
        .zip(&ids)
        .map(|(mut draft, id)| {
            draft.tokens.shuffle(&mut rng);
            Document {
                doc_id: id.clone(),
                text: draft.tokens.join(" "),
            }
        })
        .collect();

    let graph = ideal_graph(&ids, &cluster_of, &doc_vectors, spec.graph_k)?;
    Ok(SynthData {
        spec: spec.clone(),
        corpus,
        queries,
        qrels,
        doc_vectors,
        query_vectors,
        graph,
        clusters: clusters
            .iter()
            .map(|c| c.iter().map(|&d| ids[d].clone()).collect())
            .collect(),
        relevant_clusters,
        visible: visible_docs,
    })
}

/// Every cluster-mate, then the most similar other documents, up to `k`
/// edges per node; weights are embedding similarities.
fn ideal_graph(ids: &[String], cluster_of: &[usize], vectors: &VectorTable, k: usize) -> Result<AffinityGraph> {
    let n = ids.len();
    let lists: Vec<Vec<(String, f64)>> = (0..n)
        .into_par_iter()
        .map(|d| {
            let row = vectors.row(d);
            let mut mates = Vec::new();
            let mut rest = Vec::new();
            for o in 0..n {
                if o == d {
                    continue;
                }
                let w = dot(row, vectors.row(o));
                if cluster_of[o] == cluster_of[d] {
                    mates.push((o, w));
                } else {
                    rest.push((o, w));
                }
            }
            let by_weight = |a: &(usize, f64), b: &(usize, f64)| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0));
            mates.sort_by(by_weight);
            mates.truncate(k);
            let room = k - mates.len();
            if room > 0 {
                let nth = room.min(rest.len().saturating_sub(1));
                rest.select_nth_unstable_by(nth, by_weight);
                rest.truncate(room);
                rest.sort_by(by_weight);
            } else {
                rest.clear();
            }
            mates.into_iter().chain(rest).map(|(o, w)| (ids[o].clone(), w)).collect()
        })
        .collect();
    let adjacency = ids.iter().cloned().zip(lists).collect();
    AffinityGraph::from_adjacency(GraphKind::LearnedAffinity, k, adjacency)
}
