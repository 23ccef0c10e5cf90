//! The estimation-driven scoring loop.
//!
//! Each batch recomputes the top scored set S, refreshes features for every
//! unscored pool member, builds the shortlists U (by query affinity) and V
//! (by set affinity), and sends the `b` candidates of `U ∪ V` with the
//! highest estimated relevance to the ranker. Scores fold back into the
//! estimator. In the adaptive setup the pool also grows with the graph
//! neighbours of every scored document.

use std::collections::{BTreeSet, HashMap};

use serde::Serialize;

use crate::baselines::rrf;
use crate::corpus_io::{sort_ranked, RankedList};
use crate::dense::{DenseScorer, Psi};
use crate::error::{OreError, Result};
use crate::estimator::EstimatorState;
use crate::features::{
    assemble_batch, neighbourhood_means, FeatureVector, Masked, Normalizer, RawFeatures, ScoredSet, Setup,
};
use crate::graph::AffinityGraph;
use crate::lexical::{InvertedIndex, Rm3Params};
use crate::rankers::{score_batch, BudgetLedger, Ranker};
use crate::text::stable_hash;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SchedulerConfig {
    /// Size of the top scored set S.
    pub s: usize,
    /// Shortlist sizes; `None` means `2 * b`.
    pub u: Option<usize>,
    pub v: Option<usize>,
    pub lambda: f64,
    pub seed: u64,
    pub random_alpha_first_batch: bool,
    /// Per-retriever depth of the hybrid first stage.
    pub first_stage_depth: usize,
    pub rm3: Rm3Params,
    /// RRF constant for the hybrid cold-start order.
    pub rrf_k: usize,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            s: 10,
            u: None,
            v: None,
            lambda: 1.0,
            seed: 0,
            random_alpha_first_batch: false,
            first_stage_depth: 1000,
            rm3: Rm3Params::default(),
            rrf_k: 60,
        }
    }
}

/// What a single query needs for scoring.
#[derive(Clone, Copy)]
pub struct QueryContext<'a> {
    pub query_id: &'a str,
    pub tokens: &'a [String],
    pub ranker: &'a dyn Ranker,
    pub psi: &'a Psi,
}

impl QueryContext<'_> {
    /// Score a batch and add the cheap scorer: the stored score `phi + psi`.
    pub fn score(&self, docs: &[&str], ledger: &mut BudgetLedger) -> Result<Vec<f64>> {
        let calls = score_batch(self.ranker, self.query_id, docs, ledger)?;
        calls
            .into_iter()
            .map(|c| Ok(c.score + self.psi.psi(self.query_id, &c.doc_id)?))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BatchRecord {
    pub index: usize,
    pub size: usize,
    pub calls_used: usize,
    pub pool_size: usize,
    /// Alpha after folding this batch in.
    pub alpha: Vec<f64>,
    /// Mean |EstRel before the update - stored score| over the batch.
    pub batch_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Sample {
    pub batch: usize,
    pub doc_id: String,
    /// Features the selection saw; `None` for systems without features.
    pub features: Option<FeatureVector>,
    pub score: f64,
    pub est_before: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Diagnostics {
    pub query_id: String,
    pub batches: Vec<BatchRecord>,
    pub samples: Vec<Sample>,
    pub ledger: BudgetLedger,
    /// The loop stopped because no unscored candidate was left.
    pub exhausted: bool,
    /// Alpha at the end of the run (empty for systems without an estimator).
    pub alpha: Vec<f64>,
    /// End-of-run features of every pool member, in doc id order.
    pub final_features: Vec<(String, FeatureVector)>,
    /// Unnormalized counterparts of `final_features`.
    pub final_raw: Vec<RawFeatures>,
}

impl Diagnostics {
    pub fn new(query_id: &str, ledger: BudgetLedger) -> Self {
        Self {
            query_id: query_id.to_string(),
            batches: Vec::new(),
            samples: Vec::new(),
            ledger,
            exhausted: false,
            alpha: Vec::new(),
            final_features: Vec::new(),
            final_raw: Vec::new(),
        }
    }

    pub fn calls_used(&self) -> usize {
        self.ledger.calls_used
    }

    pub fn latency_ms(&self) -> f64 {
        self.ledger.simulated_latency_ms()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SystemRun {
    pub ranked: RankedList,
    pub diagnostics: Diagnostics,
}

/// BM25 top-`depth` documents with positive score.
pub fn bm25_first_stage(lex: &InvertedIndex, tokens: &[String], depth: usize) -> RankedList {
    lex.search(tokens, depth)
        .into_iter()
        .map(|(i, s)| (lex.doc_id(i).to_string(), s))
        .collect()
}

/// Top-`depth` documents by embedding similarity.
pub fn dense_first_stage(dense: &DenseScorer, query_id: &str, depth: usize) -> Result<RankedList> {
    let ids = dense.table().docs.ids();
    let mut list: RankedList = dense
        .sim_all(query_id)?
        .into_iter()
        .enumerate()
        .map(|(r, s)| (ids[r].clone(), s))
        .collect();
    sort_ranked(&mut list);
    list.truncate(depth);
    Ok(list)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Provenance {
    Initial,
    Neighbour,
}

#[derive(Debug, Clone)]
struct Member {
    doc_id: String,
    lex: u32,
    provenance: Provenance,
    bm25: f64,
    dense: Masked,
    dense_row: Option<usize>,
    score: Option<f64>,
}

enum Mode<'a> {
    Hybrid {
        dense: &'a DenseScorer,
        cold_order: Vec<String>,
    },
    Adaptive {
        graph: &'a AffinityGraph,
    },
}

struct Loop<'a> {
    setup: Setup,
    mode: Mode<'a>,
    cfg: &'a SchedulerConfig,
    ctx: QueryContext<'a>,
    lex: &'a InvertedIndex,
    members: Vec<Member>,
    lookup: HashMap<String, usize>,
    est: EstimatorState,
    norm: Normalizer,
    diag: Diagnostics,
    ledger: BudgetLedger,
}

fn estimator_seed(seed: u64, query_id: &str) -> u64 {
    stable_hash(seed, &[b"alpha", query_id.as_bytes()])
}

/// Hybrid setup over the union of the BM25 and dense first stages.
pub fn run_hybrid(
    ctx: QueryContext<'_>,
    lex: &InvertedIndex,
    dense: &DenseScorer,
    cfg: &SchedulerConfig,
    ledger: BudgetLedger,
) -> Result<SystemRun> {
    let bm25 = bm25_first_stage(lex, ctx.tokens, cfg.first_stage_depth);
    let semantic = dense_first_stage(dense, ctx.query_id, cfg.first_stage_depth)?;
    let cold_order: Vec<String> = rrf(&[&bm25, &semantic], cfg.rrf_k).into_iter().map(|(d, _)| d).collect();
    let pool: BTreeSet<&str> = bm25.iter().chain(&semantic).map(|(d, _)| d.as_str()).collect();
    let q = dense.query_vector(ctx.query_id)?;
    let weights = lex.weigh_tokens(ctx.tokens);
    let mut lp = Loop::new(Setup::Hybrid, Mode::Hybrid { dense, cold_order }, cfg, ctx, lex, ledger)?;
    for d in pool {
        let idx = lex.doc_idx(d)?;
        let row = dense.doc_row(d)?;
        let sim = dense.sim_vec_row(q, row)?;
        lp.add(d, idx, Provenance::Initial, lex.score_weighted(&weights, idx), (sim, true), Some(row));
    }
    lp.run()
}

/// Adaptive setup: BM25 top-`c` plus graph neighbours of scored documents.
pub fn run_adaptive(
    ctx: QueryContext<'_>,
    lex: &InvertedIndex,
    graph: &AffinityGraph,
    cfg: &SchedulerConfig,
    ledger: BudgetLedger,
) -> Result<SystemRun> {
    let initial = bm25_first_stage(lex, ctx.tokens, ledger.c);
    let mut lp = Loop::new(Setup::Adaptive, Mode::Adaptive { graph }, cfg, ctx, lex, ledger)?;
    for (d, s) in &initial {
        let idx = lex.doc_idx(d)?;
        lp.add(d, idx, Provenance::Initial, *s, (0.0, false), None);
    }
    lp.run()
}

impl<'a> Loop<'a> {
    fn new(
        setup: Setup,
        mode: Mode<'a>,
        cfg: &'a SchedulerConfig,
        ctx: QueryContext<'a>,
        lex: &'a InvertedIndex,
        ledger: BudgetLedger,
    ) -> Result<Self> {
        if cfg.s == 0 {
            return Err(OreError::validation("scored-set size s must be at least 1"));
        }
        let est = EstimatorState::init(setup.dim(), cfg.lambda, estimator_seed(cfg.seed, ctx.query_id))?;
        Ok(Self {
            setup,
            mode,
            cfg,
            ctx,
            lex,
            members: Vec::new(),
            lookup: HashMap::new(),
            est,
            norm: Normalizer::new(setup.dim()),
            diag: Diagnostics::new(ctx.query_id, ledger.clone()),
            ledger,
        })
    }

    fn add(&mut self, doc_id: &str, lex: u32, provenance: Provenance, bm25: f64, dense: Masked, dense_row: Option<usize>) {
        if self.lookup.contains_key(doc_id) {
            return;
        }
        self.lookup.insert(doc_id.to_string(), self.members.len());
        self.members.push(Member {
            doc_id: doc_id.to_string(),
            lex,
            provenance,
            bm25,
            dense,
            dense_row,
            score: None,
        });
    }

    fn scored_set(&self, size: usize) -> ScoredSet<String> {
        ScoredSet::top(
            self.members
                .iter()
                .filter_map(|m| m.score.map(|s| (m.doc_id.clone(), s))),
            size,
        )
    }

    fn raw_features(&self, which: &[usize]) -> Result<Vec<RawFeatures>> {
        let set = self.scored_set(self.cfg.s);
        match &self.mode {
            Mode::Adaptive { graph } => Ok(which
                .iter()
                .map(|&i| {
                    let m = &self.members[i];
                    let (aff, mean_score) = match neighbourhood_means(graph.neighbours(&m.doc_id), |k| set.score_of(k)) {
                        Some((a, s)) => ((a, true), (s, true)),
                        None => ((0.0, false), (0.0, false)),
                    };
                    RawFeatures::from_masked(&[(m.bm25, true), aff, mean_score])
                })
                .collect()),
            Mode::Hybrid { dense, .. } => {
                let feedback = self.scored_set(self.cfg.rm3.fb_docs);
                let expanded = if feedback.is_empty() {
                    None
                } else {
                    let fb: Vec<u32> = feedback.entries().iter().map(|(d, _)| self.members[self.lookup[d]].lex).collect();
                    let e = self
                        .lex
                        .rm3_expand_idx(self.ctx.tokens, &fb, self.cfg.rm3.fb_terms, self.cfg.rm3.orig_weight)?;
                    Some(self.lex.weigh_expanded(&e))
                };
                let set_rows: Vec<(usize, f64)> = set
                    .entries()
                    .iter()
                    .filter_map(|(d, s)| self.members[self.lookup[d]].dense_row.map(|r| (r, *s)))
                    .collect();
                which
                    .iter()
                    .map(|&i| {
                        let m = &self.members[i];
                        let x3 = match &expanded {
                            Some(w) => (self.lex.score_weighted(w, m.lex), true),
                            None => (0.0, false),
                        };
                        let set_term = match m.dense_row {
                            Some(row) if !set.is_empty() && set_rows.len() == set.len() => {
                                let mut total = 0.0;
                                for &(r, s) in &set_rows {
                                    total += s * dense.sim_rows(row, r)?;
                                }
                                (total / set_rows.len() as f64, true)
                            }
                            _ => (0.0, false),
                        };
                        Ok(RawFeatures::from_masked(&[(m.bm25, true), m.dense, x3, set_term]))
                    })
                    .collect()
            }
        }
    }

    fn shortlist_sizes(&self) -> (usize, usize) {
        let b = self.ledger.b;
        (self.cfg.u.unwrap_or(2 * b), self.cfg.v.unwrap_or(2 * b))
    }

    /// Top-`n` of `keys` by value, ties by doc id.
    fn top_by(&self, mut keys: Vec<(usize, f64)>, n: usize) -> Vec<usize> {
        keys.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| self.members[a.0].doc_id.cmp(&self.members[b.0].doc_id))
        });
        keys.truncate(n);
        keys.into_iter().map(|(i, _)| i).collect()
    }

    /// Candidates `U ∪ V` for the next batch.
    fn shortlists(&self, unscored: &[usize], raws: &[RawFeatures], fvs: &[FeatureVector]) -> Vec<usize> {
        let (u, v) = self.shortlist_sizes();
        let alpha = self.est.alpha();
        let (q2d, d2s): (Vec<(usize, f64)>, Vec<(usize, f64)>) = match self.setup {
            Setup::Adaptive => (
                unscored.iter().zip(raws).map(|(&i, r)| (i, r.values[0])).collect(),
                unscored
                    .iter()
                    .zip(raws)
                    .filter(|(_, r)| r.mask[1])
                    .map(|(&i, r)| (i, r.values[1]))
                    .collect(),
            ),
            Setup::Hybrid => (
                unscored
                    .iter()
                    .zip(fvs)
                    .map(|(&i, f)| (i, alpha[0] * f.values[0] + alpha[1] * f.values[1]))
                    .collect(),
                unscored
                    .iter()
                    .zip(fvs)
                    .filter(|(_, f)| f.mask[2] || f.mask[3])
                    .map(|(&i, f)| (i, alpha[2] * f.values[2] + alpha[3] * f.values[3]))
                    .collect(),
            ),
        };
        let mut out = self.top_by(q2d, u);
        for i in self.top_by(d2s, v) {
            if !out.contains(&i) {
                out.push(i);
            }
        }
        out
    }

    /// Deterministic cold start: first-stage order.
    fn cold_start(&self, n: usize) -> Vec<usize> {
        match &self.mode {
            Mode::Hybrid { cold_order, .. } => cold_order.iter().take(n).map(|d| self.lookup[d]).collect(),
            Mode::Adaptive { .. } => {
                let keys = self
                    .members
                    .iter()
                    .enumerate()
                    .filter(|(_, m)| m.provenance == Provenance::Initial)
                    .map(|(i, m)| (i, m.bm25))
                    .collect();
                self.top_by(keys, n)
            }
        }
    }

    fn run(mut self) -> Result<SystemRun> {
        let mut batch = 0usize;
        while self.ledger.remaining() > 0 {
            let unscored: Vec<usize> = (0..self.members.len()).filter(|&i| self.members[i].score.is_none()).collect();
            let raws = self.raw_features(&unscored)?;
            let fvs = assemble_batch(self.setup, &raws, &mut self.norm);
            let position: HashMap<usize, usize> = unscored.iter().enumerate().map(|(p, &i)| (i, p)).collect();
            let size = self.ledger.next_batch_size();

            let chosen: Vec<usize> = if batch == 0 && !self.cfg.random_alpha_first_batch {
                self.cold_start(size)
            } else {
                let cands = self.shortlists(&unscored, &raws, &fvs);
                let keyed = cands
                    .into_iter()
                    .map(|i| Ok((i, self.est.est_rel(&fvs[position[&i]])?)))
                    .collect::<Result<Vec<_>>>()?;
                self.top_by(keyed, size)
            };
            if chosen.is_empty() {
                self.diag.exhausted = true;
                break;
            }

            let ids: Vec<&str> = chosen.iter().map(|&i| self.members[i].doc_id.as_str()).collect();
            let scores = self.ctx.score(&ids, &mut self.ledger)?;
            let mut folded = Vec::with_capacity(chosen.len());
            let mut err = 0.0;
            for (&i, &y) in chosen.iter().zip(&scores) {
                let fv = fvs[position[&i]].clone();
                let before = self.est.est_rel(&fv)?;
                err += (before - y).abs();
                self.members[i].score = Some(y);
                self.diag.samples.push(Sample {
                    batch,
                    doc_id: self.members[i].doc_id.clone(),
                    features: Some(fv.clone()),
                    score: y,
                    est_before: Some(before),
                });
                folded.push((fv, y));
            }
            self.est.observe(&folded)?;

            if let Mode::Adaptive { graph } = &self.mode {
                let graph: &AffinityGraph = graph;
                for &i in &chosen {
                    let source = self.members[i].doc_id.clone();
                    for (n, _) in graph.neighbours(&source) {
                        if !self.lookup.contains_key(n) {
                            let idx = self.lex.doc_idx(n)?;
                            let bm25 = self.lex.bm25_qd(self.ctx.tokens, n)?;
                            self.add(n, idx, Provenance::Neighbour, bm25, (0.0, false), None);
                        }
                    }
                }
            }

            self.diag.batches.push(BatchRecord {
                index: batch,
                size: chosen.len(),
                calls_used: self.ledger.calls_used,
                pool_size: self.members.len(),
                alpha: self.est.alpha().to_vec(),
                batch_error: Some(err / chosen.len() as f64),
            });
            batch += 1;
        }
        if !self.diag.exhausted && self.ledger.calls_used != self.ledger.limit() {
            return Err(OreError::validation(format!(
                "internal: scored {} documents with a limit of {}",
                self.ledger.calls_used,
                self.ledger.limit()
            )));
        }
        self.finish()
    }

    fn finish(mut self) -> Result<SystemRun> {
        let mut order: Vec<usize> = (0..self.members.len()).collect();
        order.sort_by(|&a, &b| self.members[a].doc_id.cmp(&self.members[b].doc_id));
        let raws = self.raw_features(&order)?;
        let fvs = assemble_batch(self.setup, &raws, &mut self.norm);
        self.diag.final_raw = raws;

        let c = self.ledger.c;
        let mut scored: RankedList = Vec::new();
        let mut estimated: RankedList = Vec::new();
        for (&i, fv) in order.iter().zip(&fvs) {
            let m = &self.members[i];
            match m.score {
                Some(s) => scored.push((m.doc_id.clone(), s)),
                None => estimated.push((m.doc_id.clone(), self.est.est_rel(fv)?)),
            }
        }
        sort_ranked(&mut estimated);
        estimated.truncate(c.saturating_sub(scored.len()));
        scored.extend(estimated);
        sort_ranked(&mut scored);
        scored.truncate(c);

        self.diag.final_features = order.iter().map(|&i| self.members[i].doc_id.clone()).zip(fvs).collect();
        self.diag.alpha = self.est.alpha().to_vec();
        self.diag.ledger = self.ledger;
        Ok(SystemRun {
            ranked: scored,
            diagnostics: self.diag,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus_io::{Document, EmbeddingTable, Qrels, VectorTable};
    use crate::dense::Metric;
    use crate::features::{d2setaff_adaptive, d2setaff_hybrid, q2daff_hybrid, x7};
    use crate::graph::GraphKind;
    use crate::lexical::Bm25Params;
    use crate::rankers::GradedOracle;
    use crate::text::tokenize;
    use std::collections::BTreeMap;
    use std::sync::Arc;

    /// 40 documents; `q` matches r0 strongly, r1..r4 share topic words with r0
    /// only; f00..f05 match `q` weakly and the other fillers not at all.
    fn planted() -> (InvertedIndex, Arc<Qrels>, AffinityGraph) {
        let mut docs = vec![Document { doc_id: "r0".into(), text: "alpha alpha topic topic".into() }];
        for i in 1..5 {
            docs.push(Document { doc_id: format!("r{i}"), text: "topic topic topic other".into() });
        }
        for i in 0..35 {
            let head = if i < 6 { "alpha" } else { "beta" };
            docs.push(Document { doc_id: format!("f{i:02}"), text: format!("{head} filler{i} noise noise") });
        }
        let lex = InvertedIndex::build(&docs, Bm25Params::default()).unwrap();
        let mut qrels = Qrels::new();
        for i in 0..5 {
            qrels.insert("q", &format!("r{i}"), 2).unwrap();
        }
        let mut adj: BTreeMap<String, Vec<(String, f64)>> = BTreeMap::new();
        for i in 0..5 {
            let list = (0..5)
                .filter(|&j| j != i)
                .map(|j| (format!("r{j}"), 0.9 - 0.02 * (i + j) as f64))
                .collect();
            adj.insert(format!("r{i}"), list);
        }
        for i in 0..35 {
            adj.insert(format!("f{i:02}"), vec![(format!("f{:02}", (i + 1) % 35), 0.5)]);
        }
        let g = AffinityGraph::from_adjacency(GraphKind::LearnedAffinity, 8, adj).unwrap();
        (lex, Arc::new(qrels), g)
    }

    fn ctx<'a>(tokens: &'a [String], ranker: &'a dyn Ranker, psi: &'a Psi) -> QueryContext<'a> {
        QueryContext { query_id: "q", tokens, ranker, psi }
    }

    #[test]
    fn adaptive_budget_and_batches() {
        let (lex, qrels, g) = planted();
        let oracle = GradedOracle::new(qrels, 0.0, 1).unwrap();
        let toks = tokenize("alpha beta");
        let psi = Psi::Disabled;
        let ledger = BudgetLedger::new(20, 4, 5, 10.0).unwrap();
        let run = run_adaptive(ctx(&toks, &oracle, &psi), &lex, &g, &SchedulerConfig::default(), ledger).unwrap();
        let d = &run.diagnostics;
        assert_eq!(d.calls_used(), 20);
        assert_eq!(d.batches.iter().map(|b| b.size).collect::<Vec<_>>(), vec![4; 5]);
        assert_eq!(d.latency_ms(), 50.0);
        assert_eq!(run.ranked.len(), 20);
        let mut seen = BTreeSet::new();
        for s in &d.samples {
            assert!(seen.insert(s.doc_id.clone()), "scored twice: {}", s.doc_id);
        }
        let pools: Vec<usize> = d.batches.iter().map(|b| b.pool_size).collect();
        assert!(pools.windows(2).all(|w| w[0] <= w[1]));
        for w in d.batches.windows(2) {
            assert!(w[1].pool_size - w[0].pool_size <= 4 * g.k);
        }
    }

    #[test]
    fn planted_cluster_found_through_graph() {
        let (lex, qrels, g) = planted();
        let oracle = GradedOracle::new(qrels, 0.0, 1).unwrap();
        let toks = tokenize("alpha");
        let psi = Psi::Disabled;
        for seed in 0..8 {
            let cfg = SchedulerConfig { seed, ..SchedulerConfig::default() };
            let ledger = BudgetLedger::new(20, 4, 5, 0.0).unwrap();
            let run = run_adaptive(ctx(&toks, &oracle, &psi), &lex, &g, &cfg, ledger).unwrap();
            let found: BTreeMap<String, usize> = run
                .diagnostics
                .samples
                .iter()
                .filter(|s| s.doc_id.starts_with('r'))
                .map(|s| (s.doc_id.clone(), s.batch))
                .collect();
            assert_eq!(found.len(), 5, "seed {seed}: {found:?}");
            assert!(found.values().all(|&b| b <= 2), "seed {seed}: {found:?}");
            let mut top: Vec<&str> = run.ranked.iter().take(5).map(|(d, _)| d.as_str()).collect();
            top.sort();
            assert_eq!(top, vec!["r0", "r1", "r2", "r3", "r4"]);
        }
    }

    #[test]
    fn cold_start_is_bm25_order() {
        let (lex, qrels, g) = planted();
        let oracle = GradedOracle::new(qrels, 0.0, 1).unwrap();
        let toks = tokenize("alpha");
        let psi = Psi::Disabled;
        let ledger = BudgetLedger::new(20, 4, 1, 0.0).unwrap();
        let run = run_adaptive(ctx(&toks, &oracle, &psi), &lex, &g, &SchedulerConfig::default(), ledger).unwrap();
        let want: Vec<String> = bm25_first_stage(&lex, &toks, 20).into_iter().take(4).map(|(d, _)| d).collect();
        let got: Vec<String> = run.diagnostics.samples.iter().map(|s| s.doc_id.clone()).collect();
        assert_eq!(got, want);
    }

    #[test]
    fn finalize_fills_with_estimates() {
        let (lex, qrels, g) = planted();
        let oracle = GradedOracle::new(qrels, 0.0, 1).unwrap();
        let toks = tokenize("alpha");
        let psi = Psi::Disabled;
        let ledger = BudgetLedger::new(20, 4, 2, 0.0).unwrap();
        let run = run_adaptive(ctx(&toks, &oracle, &psi), &lex, &g, &SchedulerConfig::default(), ledger).unwrap();
        let d = &run.diagnostics;
        assert_eq!(run.ranked.len(), 20.min(d.final_features.len()));
        let scored: BTreeMap<&str, f64> = d.samples.iter().map(|s| (s.doc_id.as_str(), s.score)).collect();
        assert_eq!(scored.len(), 8);
        let fv: BTreeMap<&str, &FeatureVector> = d.final_features.iter().map(|(k, v)| (k.as_str(), v)).collect();
        for (doc, score) in &run.ranked {
            match scored.get(doc.as_str()) {
                Some(s) => assert_eq!(s, score),
                None => {
                    let e: f64 = d.alpha.iter().zip(&fv[doc.as_str()].values).map(|(a, x)| a * x).sum();
                    assert!((e - score).abs() < 1e-12);
                }
            }
        }
        let unscored_in_list = run.ranked.iter().filter(|(k, _)| !scored.contains_key(k.as_str())).count();
        assert_eq!(unscored_in_list, run.ranked.len() - 8);
        assert!(run.ranked.windows(2).all(|w| w[0].1 >= w[1].1));
    }

    #[test]
    fn adaptive_features_match_reference_functions() {
        let (lex, qrels, g) = planted();
        let oracle = GradedOracle::new(qrels, 0.3, 5).unwrap();
        let toks = tokenize("alpha");
        let psi = Psi::Disabled;
        let ledger = BudgetLedger::new(20, 4, 3, 0.0).unwrap();
        let run = run_adaptive(ctx(&toks, &oracle, &psi), &lex, &g, &SchedulerConfig::default(), ledger).unwrap();
        let d = &run.diagnostics;
        let set = ScoredSet::top(d.samples.iter().map(|s| (s.doc_id.clone(), s.score)), 10);
        let raws: Vec<RawFeatures> = d
            .final_features
            .iter()
            .map(|(doc, _)| {
                RawFeatures::from_masked(&[
                    (lex.bm25_qd(&toks, doc).unwrap(), true),
                    d2setaff_adaptive(&g, doc, &set),
                    x7(doc, &set, &g),
                ])
            })
            .collect();
        assert!(raws.iter().any(|r| r.mask[1]));
        assert_eq!(d.final_raw.len(), raws.len());
        for (got, want) in d.final_raw.iter().zip(&raws) {
            assert_eq!(got.mask, want.mask);
            for (a, b) in got.values.iter().zip(&want.values) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    fn hybrid_fixture() -> (InvertedIndex, DenseScorer, Arc<Qrels>) {
        let mut docs = Vec::new();
        let mut vt = VectorTable::new(3).unwrap();
        for i in 0..30 {
            let text = match i % 3 {
                0 => format!("apple pie d{i}"),
                1 => format!("apple tart crumb d{i}"),
                _ => format!("crumb cake d{i}"),
            };
            docs.push(Document { doc_id: format!("d{i:02}"), text });
            let t = i as f64 / 30.0;
            vt.insert(&format!("d{i:02}"), &[t.cos(), t.sin(), (i % 3) as f64 * 0.2]).unwrap();
        }
        let mut qt = VectorTable::new(3).unwrap();
        qt.insert("q", &[1.0, 0.2, 0.1]).unwrap();
        let table = Arc::new(EmbeddingTable::new(vt).with_queries(qt).unwrap());
        let mut qrels = Qrels::new();
        for i in (0..30).step_by(4) {
            qrels.insert("q", &format!("d{i:02}"), 1 + (i % 3) as u8).unwrap();
        }
        (
            InvertedIndex::build(&docs, Bm25Params::default()).unwrap(),
            DenseScorer::new(table, Metric::Dot),
            Arc::new(qrels),
        )
    }

    #[test]
    fn hybrid_budget_and_reference_features() {
        let (lex, dense, qrels) = hybrid_fixture();
        let oracle = GradedOracle::new(qrels, 0.1, 2).unwrap();
        let toks = tokenize("apple crumb");
        let psi = Psi::Main(dense.clone());
        let cfg = SchedulerConfig::default();
        let ledger = BudgetLedger::new(10, 3, 4, 0.0).unwrap();
        let run = run_hybrid(ctx(&toks, &oracle, &psi), &lex, &dense, &cfg, ledger).unwrap();
        let d = &run.diagnostics;
        assert_eq!(d.calls_used(), 10);
        assert_eq!(d.batches.iter().map(|b| b.size).collect::<Vec<_>>(), vec![3, 3, 3, 1]);
        assert_eq!(d.final_features.len(), 30);
        for s in &d.samples {
            let phi = oracle.score("q", &s.doc_id).unwrap();
            assert!((s.score - phi - dense.sim_qd("q", &s.doc_id).unwrap()).abs() < 1e-12);
        }

        let set = ScoredSet::top(d.samples.iter().map(|s| (s.doc_id.clone(), s.score)), cfg.s);
        let fb = ScoredSet::top(d.samples.iter().map(|s| (s.doc_id.clone(), s.score)), cfg.rm3.fb_docs);
        let fb_ids: Vec<&str> = fb.entries().iter().map(|(k, _)| k.as_str()).collect();
        let e = lex.rm3_expand(&toks, &fb_ids, cfg.rm3.fb_terms, cfg.rm3.orig_weight).unwrap();
        let raws: Vec<RawFeatures> = d
            .final_features
            .iter()
            .map(|(doc, _)| {
                let (x1, x2) = q2daff_hybrid(&lex, &dense, &toks, "q", doc);
                let (x3, x5) = d2setaff_hybrid(&lex, &dense, Some(&e), doc, &set);
                RawFeatures::from_masked(&[x1, x2, x3, x5])
            })
            .collect();
        for (got, want) in d.final_raw.iter().zip(&raws) {
            assert_eq!(got.mask, want.mask);
            for (a, b) in got.values.iter().zip(&want.values) {
                assert!((a - b).abs() < 1e-9, "{a} vs {b}");
            }
        }
        // The pool is fixed, so the query-side ranges are pinned by the first batch.
        let mut norm = Normalizer::new(4);
        for r in &raws {
            norm.observe(r);
        }
        for ((_, got), raw) in d.final_features.iter().zip(&raws) {
            for f in 0..2 {
                assert!((got.values[f] - norm.scale(f, raw.values[f])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn hybrid_cold_start_follows_rrf() {
        let (lex, dense, qrels) = hybrid_fixture();
        let oracle = GradedOracle::new(qrels, 0.0, 2).unwrap();
        let toks = tokenize("apple crumb");
        let psi = Psi::Disabled;
        let cfg = SchedulerConfig::default();
        let ledger = BudgetLedger::new(10, 5, 1, 0.0).unwrap();
        let run = run_hybrid(ctx(&toks, &oracle, &psi), &lex, &dense, &cfg, ledger).unwrap();
        let bm = bm25_first_stage(&lex, &toks, 1000);
        let de = dense_first_stage(&dense, "q", 1000).unwrap();
        let want: Vec<String> = rrf(&[&bm, &de], 60).into_iter().take(5).map(|(d, _)| d).collect();
        let got: Vec<String> = run.diagnostics.samples.iter().map(|s| s.doc_id.clone()).collect();
        assert_eq!(got, want);
    }

    #[test]
    fn noiseless_full_budget_orders_relevant_first() {
        let (lex, dense, qrels) = hybrid_fixture();
        let oracle = GradedOracle::new(qrels.clone(), 0.0, 2).unwrap();
        let toks = tokenize("apple crumb");
        let psi = Psi::Disabled;
        let ledger = BudgetLedger::new(30, 5, 6, 0.0).unwrap();
        let run = run_hybrid(ctx(&toks, &oracle, &psi), &lex, &dense, &SchedulerConfig::default(), ledger).unwrap();
        let grades: Vec<u8> = run.ranked.iter().map(|(d, _)| qrels.grade("q", d)).collect();
        assert!(grades.windows(2).all(|w| w[0] >= w[1]), "{grades:?}");
    }

    #[test]
    fn empty_pool_stops_early() {
        let (lex, qrels, _) = planted();
        let oracle = GradedOracle::new(qrels, 0.0, 1).unwrap();
        let toks = tokenize("zzz");
        let psi = Psi::Disabled;
        let ledger = BudgetLedger::new(20, 4, 5, 0.0).unwrap();
        let g = AffinityGraph::empty(GraphKind::LearnedAffinity);
        let run = run_adaptive(ctx(&toks, &oracle, &psi), &lex, &g, &SchedulerConfig::default(), ledger).unwrap();
        assert!(run.diagnostics.exhausted);
        assert_eq!(run.diagnostics.calls_used(), 0);
        assert!(run.ranked.is_empty());
    }
}
