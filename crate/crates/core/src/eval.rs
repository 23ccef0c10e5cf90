//! Retrieval metrics and system comparison.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::corpus_io::{Qrels, RankedList};
use crate::error::{OreError, Result};

/// Ranked lists keyed by query id.
pub type Run = BTreeMap<String, RankedList>;

/// Recall of one ranked list; `None` when the query has no relevant document.
pub fn query_recall(list: &[(String, f64)], qrels: &Qrels, query_id: &str, k: usize, min_grade: u8) -> Option<f64> {
    let relevant = qrels.relevant(query_id, min_grade);
    if relevant.is_empty() {
        return None;
    }
    let hits = list
        .iter()
        .take(k)
        .filter(|(d, _)| qrels.grade(query_id, d) >= min_grade)
        .count();
    Some(hits as f64 / relevant.len() as f64)
}

/// nDCG with gain `2^grade - 1` and a `log2(rank + 1)` discount.
pub fn query_ndcg(list: &[(String, f64)], qrels: &Qrels, query_id: &str, k: usize) -> Option<f64> {
    let mut ideal: Vec<u8> = qrels
        .judged(query_id)
        .map(|j| j.values().copied().filter(|&g| g > 0).collect())
        .unwrap_or_default();
    if ideal.is_empty() {
        return None;
    }
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let gain = |g: u8| (2f64).powi(g as i32) - 1.0;
    let discount = |i: usize| 1.0 / ((i + 2) as f64).log2();
    let dcg: f64 = list
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, (d, _))| gain(qrels.grade(query_id, d)) * discount(i))
        .sum();
    let idcg: f64 = ideal.iter().take(k).enumerate().map(|(i, &g)| gain(g) * discount(i)).sum();
    Some(dcg / idcg)
}

fn mean_over_judged(run: &Run, qrels: &Qrels, f: impl Fn(&[(String, f64)], &str) -> Option<f64>) -> f64 {
    let empty = Vec::new();
    let vals: Vec<f64> = qrels
        .query_ids()
        .filter_map(|q| f(run.get(q).unwrap_or(&empty), q))
        .collect();
    if vals.is_empty() {
        0.0
    } else {
        vals.iter().sum::<f64>() / vals.len() as f64
    }
}

/// Mean Recall@k over queries with at least one relevant document.
pub fn recall_at_k(run: &Run, qrels: &Qrels, k: usize, min_grade: u8) -> f64 {
    mean_over_judged(run, qrels, |l, q| query_recall(l, qrels, q, k, min_grade))
}

pub fn ndcg_at_k(run: &Run, qrels: &Qrels, k: usize) -> f64 {
    mean_over_judged(run, qrels, |l, q| query_ndcg(l, qrels, q, k))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueryMetrics {
    pub recall: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
    pub calls_used: usize,
    pub latency_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub system: String,
    pub per_query: BTreeMap<String, QueryMetrics>,
    pub mean_recall: BTreeMap<usize, f64>,
    pub mean_ndcg: BTreeMap<usize, f64>,
    pub mean_calls: f64,
    pub mean_latency_ms: f64,
}

/// Budget figures for one query: `(calls_used, simulated latency ms)`.
pub type Cost = (usize, f64);

impl MetricsReport {
    /// Metrics over every query that has judged relevant documents.
    pub fn build(
        system: &str,
        run: &Run,
        costs: &BTreeMap<String, Cost>,
        qrels: &Qrels,
        ks: &[usize],
        min_grade: u8,
    ) -> Self {
        let empty = Vec::new();
        let mut per_query = BTreeMap::new();
        for q in qrels.query_ids() {
            let list = run.get(q).unwrap_or(&empty);
            let Some(_) = query_recall(list, qrels, q, 1, min_grade) else {
                continue;
            };
            let (calls_used, latency_ms) = costs.get(q).copied().unwrap_or((0, 0.0));
            per_query.insert(
                q.to_string(),
                QueryMetrics {
                    recall: ks
                        .iter()
                        .map(|&k| (k, query_recall(list, qrels, q, k, min_grade).unwrap_or(0.0)))
                        .collect(),
                    ndcg: ks
                        .iter()
                        .map(|&k| (k, query_ndcg(list, qrels, q, k).unwrap_or(0.0)))
                        .collect(),
                    calls_used,
                    latency_ms,
                },
            );
        }
        let n = per_query.len().max(1) as f64;
        let mean = |f: &dyn Fn(&QueryMetrics) -> f64| per_query.values().map(f).sum::<f64>() / n;
        let mean_recall = ks.iter().map(|&k| (k, mean(&|m| m.recall[&k]))).collect();
        let mean_ndcg = ks.iter().map(|&k| (k, mean(&|m| m.ndcg[&k]))).collect();
        let mean_calls = mean(&|m| m.calls_used as f64);
        let mean_latency_ms = mean(&|m| m.latency_ms);
        Self {
            system: system.to_string(),
            per_query,
            mean_recall,
            mean_ndcg,
            mean_calls,
            mean_latency_ms,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub metric: String,
    pub system: String,
    pub reference: String,
    pub mean: f64,
    pub reference_mean: f64,
    pub delta: f64,
    /// Relative gain in percent; `None` when the reference mean is 0.
    pub gain_pct: Option<f64>,
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
    /// Two-sided exact sign test over non-tied queries.
    pub sign_p: f64,
}

/// Two-sided exact binomial sign test.
pub fn sign_test(wins: usize, losses: usize) -> f64 {
    let n = wins + losses;
    if n == 0 {
        return 1.0;
    }
    let k = wins.min(losses);
    // P(X <= k) for X ~ Bin(n, 1/2), computed in log space.
    let ln_half_n = -(n as f64) * std::f64::consts::LN_2;
    let mut ln_choose = 0.0;
    let mut tail = 0.0;
    for i in 0..=k {
        if i > 0 {
            ln_choose += ((n - i + 1) as f64).ln() - (i as f64).ln();
        }
        tail += (ln_choose + ln_half_n).exp();
    }
    (2.0 * tail).min(1.0)
}

/// Compare every report against the first one, metric by metric.
pub fn compare_systems(reports: &[MetricsReport]) -> Result<Vec<ComparisonRow>> {
    if reports.len() < 2 {
        return Err(OreError::validation("comparison needs at least two reports"));
    }
    let reference = &reports[0];
    let queries: Vec<&String> = reference.per_query.keys().collect();
    for r in &reports[1..] {
        if r.per_query.keys().collect::<Vec<_>>() != queries {
            return Err(OreError::validation(format!(
                "reports {} and {} cover different queries",
                reference.system, r.system
            )));
        }
    }
    let mut rows = Vec::new();
    let metrics: Vec<(String, Box<dyn Fn(&QueryMetrics) -> f64>)> = reference
        .mean_recall
        .keys()
        .map(|&k| (format!("recall@{k}"), Box::new(move |m: &QueryMetrics| m.recall[&k]) as Box<dyn Fn(&QueryMetrics) -> f64>))
        .chain(
            reference
                .mean_ndcg
                .keys()
                .map(|&k| (format!("ndcg@{k}"), Box::new(move |m: &QueryMetrics| m.ndcg[&k]) as Box<dyn Fn(&QueryMetrics) -> f64>)),
        )
        .collect();
    for (name, f) in &metrics {
        let n = queries.len().max(1) as f64;
        let reference_mean = reference.per_query.values().map(f).sum::<f64>() / n;
        for r in &reports[1..] {
            let mean = r.per_query.values().map(f).sum::<f64>() / n;
            let (mut wins, mut losses, mut ties) = (0, 0, 0);
            for q in &queries {
                let a = f(&r.per_query[*q]);
                let b = f(&reference.per_query[*q]);
                match a.partial_cmp(&b) {
                    Some(std::cmp::Ordering::Greater) => wins += 1,
                    Some(std::cmp::Ordering::Less) => losses += 1,
                    _ => ties += 1,
                }
            }
            let delta = mean - reference_mean;
            rows.push(ComparisonRow {
                metric: name.clone(),
                system: r.system.clone(),
                reference: reference.system.clone(),
                mean,
                reference_mean,
                delta,
                gain_pct: (reference_mean != 0.0).then(|| 100.0 * delta / reference_mean),
                wins,
                losses,
                ties,
                sign_p: sign_test(wins, losses),
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ranked(ids: &[&str]) -> RankedList {
        ids.iter().enumerate().map(|(i, d)| (d.to_string(), -(i as f64))).collect()
    }

    fn qrels(rows: &[(&str, &str, u8)]) -> Qrels {
        let mut q = Qrels::new();
        for (a, b, g) in rows {
            q.insert(a, b, *g).unwrap();
        }
        q
    }

    #[test]
    fn recall_definition() {
        let q = qrels(&[("q", "a", 1), ("q", "b", 2), ("q", "c", 1), ("q", "d", 3), ("q", "x", 0)]);
        let l = ranked(&["a", "x", "d", "z"]);
        assert_eq!(query_recall(&l, &q, "q", 4, 1), Some(0.5));
        assert_eq!(query_recall(&ranked(&["d", "c", "b", "a"]), &q, "q", 4, 1), Some(1.0));
        assert_eq!(query_recall(&l, &q, "q", 4, 2), Some(0.5));
        assert_eq!(query_recall(&l, &q, "nope", 4, 1), None);
    }

    #[test]
    fn ndcg_hand_values() {
        let q = qrels(&[("q", "r", 1)]);
        let v = query_ndcg(&ranked(&["x", "r"]), &q, "q", 2).unwrap();
        assert!((v - 1.0 / 3f64.log2()).abs() < 1e-12);
        assert!((v - 0.6309).abs() < 1e-4);
        let q = qrels(&[("q", "a", 3), ("q", "b", 1)]);
        assert_eq!(query_ndcg(&ranked(&["a", "b"]), &q, "q", 10), Some(1.0));
        assert_eq!(query_ndcg(&ranked(&["a"]), &qrels(&[("q", "a", 0)]), "q", 10), None);
    }

    #[test]
    fn means_exclude_unjudged_queries() {
        let q = qrels(&[("q1", "a", 1), ("q2", "b", 1), ("q3", "c", 0)]);
        let mut run = Run::new();
        run.insert("q1".into(), ranked(&["a"]));
        run.insert("q3".into(), ranked(&["c"]));
        assert_eq!(recall_at_k(&run, &q, 10, 1), 0.5);
    }

    #[test]
    fn comparison_arithmetic() {
        let q = qrels(&[("q1", "a", 1), ("q1", "b", 1), ("q2", "c", 1)]);
        let mut base = Run::new();
        base.insert("q1".into(), ranked(&["a", "z"]));
        base.insert("q2".into(), ranked(&["z", "y"]));
        let mut better = Run::new();
        better.insert("q1".into(), ranked(&["a", "b"]));
        better.insert("q2".into(), ranked(&["z", "y"]));
        let costs = BTreeMap::new();
        let a = MetricsReport::build("base", &base, &costs, &q, &[2], 1);
        let b = MetricsReport::build("new", &better, &costs, &q, &[2], 1);
        assert_eq!(a.mean_recall[&2], 0.25);
        assert_eq!(b.mean_recall[&2], 0.5);
        let rows = compare_systems(&[a.clone(), b]).unwrap();
        let r = rows.iter().find(|r| r.metric == "recall@2").unwrap();
        assert_eq!(r.delta, 0.25);
        assert_eq!(r.gain_pct, Some(100.0));
        assert_eq!((r.wins, r.losses, r.ties), (1, 0, 1));

        let same = compare_systems(&[a.clone(), a.clone()]).unwrap();
        assert!(same.iter().all(|r| r.delta == 0.0 && r.gain_pct.unwrap_or(0.0) == 0.0));

        let mut other = Run::new();
        other.insert("q1".into(), ranked(&["a"]));
        let c = MetricsReport::build("c", &other, &costs, &qrels(&[("q1", "a", 1)]), &[2], 1);
        assert!(compare_systems(&[a, c]).is_err());
    }

    #[test]
    fn sign_test_values() {
        assert_eq!(sign_test(0, 0), 1.0);
        assert!((sign_test(5, 0) - 2.0 / 32.0).abs() < 1e-12);
        assert!((sign_test(8, 2) - 2.0 * 56.0 / 1024.0).abs() < 1e-12);
        assert_eq!(sign_test(3, 3), 1.0);
    }

    proptest! {
        #[test]
        fn recall_monotone_in_k(order in Just((0..12).map(|i| format!("d{i}")).collect::<Vec<_>>()).prop_shuffle(),
                                grades in prop::collection::vec(0u8..4, 12)) {
            let mut q = Qrels::new();
            for (i, g) in grades.iter().enumerate() {
                q.insert("q", &format!("d{i}"), *g).unwrap();
            }
            let l: RankedList = order.iter().enumerate().map(|(i, d)| (d.clone(), -(i as f64))).collect();
            let mut prev = 0.0;
            for k in 1..=12 {
                if let Some(r) = query_recall(&l, &q, "q", k, 1) {
                    prop_assert!(r >= prev && (0.0..=1.0).contains(&r));
                    prev = r;
                }
                if let Some(n) = query_ndcg(&l, &q, "q", k) {
                    prop_assert!((0.0..=1.0 + 1e-12).contains(&n));
                }
            }
        }
    }
}
