//! Comparison systems: score fusion, plain re-ranking, graph alternation
//! in the style of GAR and QUAM, and exhaustive scoring.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::Serialize;

use crate::corpus_io::{sort_ranked, RankedList};
use crate::error::{OreError, Result};
use crate::features::{d2setaff_adaptive, ScoredSet};
use crate::graph::AffinityGraph;
use crate::rankers::BudgetLedger;
use crate::scheduler::{BatchRecord, Diagnostics, QueryContext, Sample, SystemRun};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FusionConfig {
    pub rrf_k: usize,
    pub cc_lambda: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            rrf_k: 60,
            cc_lambda: 0.5,
        }
    }
}

/// Reciprocal rank fusion: each list contributes `1 / (k + rank)`.
pub fn rrf(lists: &[&[(String, f64)]], k: usize) -> RankedList {
    let mut acc: HashMap<&str, f64> = HashMap::new();
    for list in lists {
        for (rank, (d, _)) in list.iter().enumerate() {
            *acc.entry(d).or_insert(0.0) += 1.0 / (k + rank + 1) as f64;
        }
    }
    let mut out: RankedList = acc.into_iter().map(|(d, s)| (d.to_string(), s)).collect();
    sort_ranked(&mut out);
    out
}

fn min_max(list: &[(String, f64)]) -> HashMap<&str, f64> {
    let lo = list.iter().map(|x| x.1).fold(f64::INFINITY, f64::min);
    let hi = list.iter().map(|x| x.1).fold(f64::NEG_INFINITY, f64::max);
    list.iter()
        .map(|(d, s)| {
            // A constant list carries no ordering; every member counts fully.
            let v = if hi > lo { (s - lo) / (hi - lo) } else { 1.0 };
            (d.as_str(), v)
        })
        .collect()
}

/// Convex combination `lambda * norm(a) + (1 - lambda) * norm(b)` with
/// per-list min-max; a document missing from a list scores 0 there.
pub fn cc_fuse(a: &[(String, f64)], b: &[(String, f64)], lambda: f64) -> Result<RankedList> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(OreError::validation(format!("cc lambda {lambda} outside [0, 1]")));
    }
    let na = min_max(a);
    let nb = min_max(b);
    let docs: HashSet<&str> = na.keys().chain(nb.keys()).copied().collect();
    let mut out: RankedList = docs
        .into_iter()
        .map(|d| {
            let s = lambda * na.get(d).copied().unwrap_or(0.0) + (1.0 - lambda) * nb.get(d).copied().unwrap_or(0.0);
            (d.to_string(), s)
        })
        .collect();
    sort_ranked(&mut out);
    Ok(out)
}

/// Scored documents sorted by score, then unscored `initial` documents in
/// their original order with scores strictly below every scored one.
fn with_backfill(scored: &BTreeMap<String, f64>, initial: &[(String, f64)], c: usize) -> RankedList {
    let mut out: RankedList = scored.iter().map(|(d, s)| (d.clone(), *s)).collect();
    sort_ranked(&mut out);
    let base = out.last().map(|x| x.1).unwrap_or(0.0);
    let mut filled = 0;
    for (d, _) in initial {
        if out.len() >= c {
            break;
        }
        if !scored.contains_key(d) {
            filled += 1;
            out.push((d.clone(), base - filled as f64));
        }
    }
    out.truncate(c);
    out
}

struct Scorer<'a> {
    ctx: QueryContext<'a>,
    ledger: BudgetLedger,
    diag: Diagnostics,
    scored: BTreeMap<String, f64>,
    batch: usize,
}

impl<'a> Scorer<'a> {
    fn new(ctx: QueryContext<'a>, ledger: BudgetLedger) -> Self {
        Self {
            diag: Diagnostics::new(ctx.query_id, ledger.clone()),
            ctx,
            ledger,
            scored: BTreeMap::new(),
            batch: 0,
        }
    }

    fn score(&mut self, docs: &[String]) -> Result<()> {
        let ids: Vec<&str> = docs.iter().map(String::as_str).collect();
        let scores = self.ctx.score(&ids, &mut self.ledger)?;
        for (d, s) in docs.iter().zip(scores) {
            self.scored.insert(d.clone(), s);
            self.diag.samples.push(Sample {
                batch: self.batch,
                doc_id: d.clone(),
                features: None,
                score: s,
                est_before: None,
            });
        }
        self.diag.batches.push(BatchRecord {
            index: self.batch,
            size: docs.len(),
            calls_used: self.ledger.calls_used,
            pool_size: 0,
            alpha: Vec::new(),
            batch_error: None,
        });
        self.batch += 1;
        Ok(())
    }

    fn finish(mut self, ranked: RankedList) -> SystemRun {
        self.diag.ledger = self.ledger;
        SystemRun {
            ranked,
            diagnostics: self.diag,
        }
    }
}

/// Score the head of `list` in batches and backfill the rest.
pub fn plain_rerank(ctx: QueryContext<'_>, list: &[(String, f64)], ledger: BudgetLedger) -> Result<SystemRun> {
    let c = ledger.c;
    let head = &list[..list.len().min(c)];
    let n = head.len().min(ledger.limit());
    let mut sc = Scorer::new(ctx, ledger);
    for chunk in head[..n].chunks(sc.ledger.b) {
        let docs: Vec<String> = chunk.iter().map(|(d, _)| d.clone()).collect();
        sc.score(&docs)?;
    }
    sc.diag.exhausted = n < sc.ledger.limit();
    let ranked = with_backfill(&sc.scored, head, c);
    Ok(sc.finish(ranked))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum FrontierOrder {
    /// Best (source score, edge weight) over scored sources.
    SourceScore,
    /// Mean edge weight to the top scored set S.
    SetAffinity { s: usize },
}

fn alternate(
    ctx: QueryContext<'_>,
    initial: &[(String, f64)],
    graph: &AffinityGraph,
    ledger: BudgetLedger,
    order: FrontierOrder,
) -> Result<SystemRun> {
    let c = ledger.c;
    let initial = &initial[..initial.len().min(c)];
    let mut sc = Scorer::new(ctx, ledger);
    let mut next_initial = 0usize;
    // Unscored neighbours of scored documents with their best (score, weight).
    let mut frontier: BTreeMap<String, (f64, f64)> = BTreeMap::new();

    while sc.ledger.remaining() > 0 {
        let size = sc.ledger.next_batch_size();
        let ranked_frontier: Vec<String> = {
            let mut keyed: Vec<(&String, (f64, f64))> = match order {
                FrontierOrder::SourceScore => frontier.iter().map(|(d, k)| (d, *k)).collect(),
                FrontierOrder::SetAffinity { s } => {
                    let set = ScoredSet::top(sc.scored.iter().map(|(d, v)| (d.clone(), *v)), s);
                    frontier
                        .keys()
                        .map(|d| {
                            let (v, m) = d2setaff_adaptive(graph, d, &set);
                            (d, (if m { 1.0 } else { 0.0 }, v))
                        })
                        .collect()
                }
            };
            keyed.sort_by(|a, b| {
                b.1 .0
                    .total_cmp(&a.1 .0)
                    .then(b.1 .1.total_cmp(&a.1 .1))
                    .then_with(|| a.0.cmp(b.0))
            });
            keyed.into_iter().map(|(d, _)| d.clone()).collect()
        };

        let mut from_initial = Vec::new();
        let mut cursor = next_initial;
        while cursor < initial.len() && from_initial.len() < size {
            if !sc.scored.contains_key(&initial[cursor].0) {
                from_initial.push(initial[cursor].0.clone());
            }
            cursor += 1;
        }

        let take_initial_first = sc.batch.is_multiple_of(2);
        let mut batch: Vec<String> = Vec::with_capacity(size);
        let push = |d: &String, batch: &mut Vec<String>| {
            if batch.len() < size && !batch.contains(d) {
                batch.push(d.clone());
            }
        };
        if take_initial_first {
            from_initial.iter().for_each(|d| push(d, &mut batch));
            ranked_frontier.iter().for_each(|d| push(d, &mut batch));
        } else {
            ranked_frontier.iter().for_each(|d| push(d, &mut batch));
            from_initial.iter().for_each(|d| push(d, &mut batch));
        }
        if batch.len() < size {
            // Both sources ran short of this batch; pull further down the initial list.
            for (d, _) in &initial[cursor.min(initial.len())..] {
                if !sc.scored.contains_key(d) {
                    push(d, &mut batch);
                }
            }
        }
        if batch.is_empty() {
            sc.diag.exhausted = true;
            break;
        }
        while next_initial < initial.len()
            && (sc.scored.contains_key(&initial[next_initial].0) || batch.contains(&initial[next_initial].0))
        {
            next_initial += 1;
        }

        sc.score(&batch)?;
        for d in &batch {
            frontier.remove(d);
            let s = sc.scored[d];
            for (n, w) in graph.neighbours(d) {
                if sc.scored.contains_key(n) {
                    continue;
                }
                let e = frontier.entry(n.clone()).or_insert((f64::NEG_INFINITY, f64::NEG_INFINITY));
                if (s, *w) > *e {
                    *e = (s, *w);
                }
            }
        }
    }
    let ranked = with_backfill(&sc.scored, initial, c);
    Ok(sc.finish(ranked))
}

/// Alternate batches between the initial list and a neighbour frontier
/// ordered by the score of the best scored source, then edge weight.
pub fn gar_style(
    ctx: QueryContext<'_>,
    initial: &[(String, f64)],
    graph: &AffinityGraph,
    ledger: BudgetLedger,
) -> Result<SystemRun> {
    alternate(ctx, initial, graph, ledger, FrontierOrder::SourceScore)
}

/// As [`gar_style`], with the frontier ordered by set affinity to the top
/// `s` scored documents.
pub fn quam_style(
    ctx: QueryContext<'_>,
    initial: &[(String, f64)],
    graph: &AffinityGraph,
    ledger: BudgetLedger,
    s: usize,
) -> Result<SystemRun> {
    if s == 0 {
        return Err(OreError::validation("scored-set size s must be at least 1"));
    }
    alternate(ctx, initial, graph, ledger, FrontierOrder::SetAffinity { s })
}

/// Score every document. Refused above `cap` unless `allow_large`.
pub fn exhaustive(
    ctx: QueryContext<'_>,
    doc_ids: &[String],
    c: usize,
    b: usize,
    per_call_ms: f64,
    cap: usize,
    allow_large: bool,
) -> Result<SystemRun> {
    if doc_ids.len() > cap && !allow_large {
        return Err(OreError::Refused(format!(
            "exhaustive scoring of {} documents exceeds the cap of {cap}",
            doc_ids.len()
        )));
    }
    let n = doc_ids.len();
    let b = b.clamp(1, n.max(1));
    let ledger = BudgetLedger::new(n.max(b), b, n.max(1).div_ceil(b), per_call_ms)?;
    let mut sc = Scorer::new(ctx, ledger);
    for chunk in doc_ids.chunks(b) {
        sc.score(chunk)?;
    }
    let mut ranked: RankedList = sc.scored.iter().map(|(d, s)| (d.clone(), *s)).collect();
    sort_ranked(&mut ranked);
    ranked.truncate(c);
    Ok(sc.finish(ranked))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus_io::Qrels;
    use crate::dense::Psi;
    use crate::graph::GraphKind;
    use crate::rankers::{CachedRanker, GradedOracle, Ranker};
    use std::sync::Arc;

    fn list(xs: &[(&str, f64)]) -> RankedList {
        xs.iter().map(|(d, s)| (d.to_string(), *s)).collect()
    }

    fn ids(l: &[(String, f64)]) -> Vec<&str> {
        l.iter().map(|x| x.0.as_str()).collect()
    }

    fn ctx<'a>(ranker: &'a dyn Ranker, psi: &'a Psi) -> QueryContext<'a> {
        QueryContext {
            query_id: "q",
            tokens: &[],
            ranker,
            psi,
        }
    }

    fn cached(scores: &[(&str, f64)]) -> CachedRanker {
        CachedRanker::from_scores(scores.iter().map(|(d, s)| (("q".to_string(), d.to_string()), *s)).collect())
    }

    fn graph(edges: &[(&str, &[(&str, f64)])]) -> AffinityGraph {
        let adj = edges
            .iter()
            .map(|(s, l)| (s.to_string(), l.iter().map(|(d, w)| (d.to_string(), *w)).collect()))
            .collect();
        AffinityGraph::from_adjacency(GraphKind::LearnedAffinity, 8, adj).unwrap()
    }

    #[test]
    fn rrf_hand_values_and_permutation() {
        let a = list(&[("x", 9.0), ("y", 5.0)]);
        let b = list(&[("x", 1.0), ("z", 0.5)]);
        let f = rrf(&[&a, &b], 60);
        assert_eq!(f[0], ("x".to_string(), 2.0 / 61.0));
        assert_eq!(f[1], ("y".to_string(), 1.0 / 62.0));
        assert_eq!(f[2], ("z".to_string(), 1.0 / 62.0));
        assert_eq!(rrf(&[&b, &a], 60), f);
        assert_eq!(ids(&rrf(&[&a, &a], 60)), vec!["x", "y"]);
    }

    #[test]
    fn cc_hand_values() {
        let a = list(&[("x", 10.0), ("y", 6.0), ("z", 2.0)]);
        let b = list(&[("z", 3.0), ("w", 1.0)]);
        let f = cc_fuse(&a, &b, 0.5).unwrap();
        let got: BTreeMap<&str, f64> = f.iter().map(|(d, s)| (d.as_str(), *s)).collect();
        assert_eq!(got["x"], 0.5);
        assert_eq!(got["y"], 0.25);
        assert_eq!(got["z"], 0.5);
        assert_eq!(got["w"], 0.0);
        assert_eq!(ids(&f), vec!["x", "z", "y", "w"]);
        let left = cc_fuse(&a, &b, 1.0).unwrap();
        let only_a: Vec<&str> = left
            .iter()
            .map(|x| x.0.as_str())
            .filter(|d| a.iter().any(|m| m.0 == *d))
            .collect();
        assert_eq!(only_a, vec!["x", "y", "z"]);
        assert!(cc_fuse(&a, &b, 1.5).is_err());
        assert!(cc_fuse(&a, &b, -0.1).is_err());
    }

    #[test]
    fn plain_rerank_scores_head_and_backfills() {
        let first = list(&[("a", 5.0), ("b", 4.0), ("c", 3.0), ("d", 2.0), ("e", 1.0)]);
        let r = cached(&[("a", 0.1), ("b", 0.9), ("c", 0.5), ("d", 0.7), ("e", 0.2)]);
        let psi = Psi::Disabled;
        let run = plain_rerank(ctx(&r, &psi), &first, BudgetLedger::new(4, 2, 1, 3.0).unwrap()).unwrap();
        assert_eq!(run.diagnostics.calls_used(), 2);
        assert_eq!(run.diagnostics.latency_ms(), 3.0);
        assert_eq!(run.ranked, list(&[("b", 0.9), ("a", 0.1), ("c", -0.9), ("d", -1.9)]));

        let full = plain_rerank(ctx(&r, &psi), &first, BudgetLedger::new(4, 2, 2, 0.0).unwrap()).unwrap();
        assert_eq!(ids(&full.ranked), vec!["b", "d", "c", "a"]);
        assert_eq!(full.diagnostics.calls_used(), 4);

        let short = list(&[("a", 5.0), ("b", 4.0)]);
        let run = plain_rerank(ctx(&r, &psi), &short, BudgetLedger::new(4, 2, 2, 0.0).unwrap()).unwrap();
        assert_eq!(run.diagnostics.calls_used(), 2);
        assert!(run.diagnostics.exhausted);
    }

    #[test]
    fn empty_graph_alternation_equals_rerank() {
        let first: RankedList = (0..30).map(|i| (format!("d{i:02}"), 30.0 - i as f64)).collect();
        let mut q = Qrels::new();
        for i in (0..30).step_by(3) {
            q.insert("q", &format!("d{i:02}"), 1 + (i % 2) as u8).unwrap();
        }
        let oracle = GradedOracle::new(Arc::new(q), 0.3, 9).unwrap();
        let psi = Psi::Disabled;
        let g = AffinityGraph::empty(GraphKind::LearnedAffinity);
        for cb in 1..=3 {
            let l = || BudgetLedger::new(20, 8, cb, 0.0).unwrap();
            let plain = plain_rerank(ctx(&oracle, &psi), &first, l()).unwrap();
            assert_eq!(gar_style(ctx(&oracle, &psi), &first, &g, l()).unwrap().ranked, plain.ranked);
            assert_eq!(quam_style(ctx(&oracle, &psi), &first, &g, l(), 10).unwrap().ranked, plain.ranked);
        }
    }

    /// 6-document instance where the best single edge and the best set
    /// affinity point at different neighbours.
    #[test]
    fn gar_and_quam_frontiers_differ() {
        let first = list(&[("a", 3.0), ("b", 2.0), ("x", 1.5), ("y", 1.2)]);
        let g = graph(&[
            ("a", &[("n1", 0.9), ("n2", 0.2)]),
            ("b", &[("n2", 0.3)]),
            ("n1", &[("a", 0.1)]),
            ("n2", &[("a", 0.8), ("b", 0.7)]),
        ]);
        let r = cached(&[("a", 1.0), ("b", 0.8), ("x", 0.0), ("y", 0.0), ("n1", 0.1), ("n2", 0.9)]);
        let psi = Psi::Disabled;
        let ledger = || BudgetLedger::new(4, 2, 2, 0.0).unwrap();
        let gar = gar_style(ctx(&r, &psi), &first, &g, ledger()).unwrap();
        let quam = quam_style(ctx(&r, &psi), &first, &g, ledger(), 10).unwrap();
        let second = |run: &SystemRun| -> Vec<String> {
            run.diagnostics.samples.iter().filter(|s| s.batch == 1).map(|s| s.doc_id.clone()).collect()
        };
        assert_eq!(second(&gar), vec!["n1", "n2"]);
        assert_eq!(second(&quam), vec!["n2", "n1"]);

        let one = || BudgetLedger::new(4, 1, 2, 0.0).unwrap();
        let gar = gar_style(ctx(&r, &psi), &first, &g, one()).unwrap();
        let quam = quam_style(ctx(&r, &psi), &first, &g, one(), 10).unwrap();
        assert_eq!(second(&gar), vec!["n1"]);
        assert_eq!(second(&quam), vec!["n2"]);
    }

    #[test]
    fn alternation_tops_up_and_backfills() {
        let first = list(&[("a", 3.0), ("b", 2.0), ("c", 1.0)]);
        let g = graph(&[("a", &[("n1", 0.5)])]);
        let r = cached(&[("a", 1.0), ("b", 0.5), ("c", 0.2), ("n1", 0.7)]);
        let psi = Psi::Disabled;
        let run = gar_style(ctx(&r, &psi), &first, &g, BudgetLedger::new(3, 2, 2, 0.0).unwrap()).unwrap();
        assert_eq!(run.diagnostics.calls_used(), 3);
        let batches: Vec<(usize, &str)> = run.diagnostics.samples.iter().map(|s| (s.batch, s.doc_id.as_str())).collect();
        assert_eq!(batches, vec![(0, "a"), (0, "b"), (1, "n1")]);
        assert_eq!(run.ranked, list(&[("a", 1.0), ("n1", 0.7), ("b", 0.5)]));

        let run = gar_style(ctx(&r, &psi), &first, &g, BudgetLedger::new(3, 1, 1, 0.0).unwrap()).unwrap();
        assert_eq!(run.ranked, list(&[("a", 1.0), ("b", 0.0), ("c", -1.0)]));
    }

    #[test]
    fn exhaustive_guard_and_count() {
        let docs: Vec<String> = (0..100).map(|i| format!("d{i:03}")).collect();
        let mut q = Qrels::new();
        q.insert("q", "d007", 3).unwrap();
        q.insert("q", "d050", 1).unwrap();
        let oracle = GradedOracle::new(Arc::new(q), 0.0, 1).unwrap();
        let psi = Psi::Disabled;
        let run = exhaustive(ctx(&oracle, &psi), &docs, 10, 16, 20.0, 1000, false).unwrap();
        assert_eq!(run.diagnostics.calls_used(), 100);
        assert_eq!(run.diagnostics.latency_ms(), 7.0 * 20.0);
        assert_eq!(ids(&run.ranked)[..2], ["d007", "d050"]);
        let err = exhaustive(ctx(&oracle, &psi), &docs, 10, 16, 0.0, 50, false).unwrap_err();
        assert_eq!(err.code(), "E_REFUSED");
        assert!(exhaustive(ctx(&oracle, &psi), &docs, 10, 16, 0.0, 50, true).is_ok());
    }
}
