//! Whole-query-set runs: system dispatch, ranker construction, and the
//! run/diagnostics/metrics writers shared by the CLI and the test suites.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::baselines::{cc_fuse, exhaustive, gar_style, plain_rerank, quam_style, rrf, FusionConfig};
use crate::corpus_io::{run_entries, write_run, Qrels, Query, RankedList, RunEntry};
use crate::dense::{DenseScorer, Psi};
use crate::error::{OreError, Result};
use crate::eval::{Cost, MetricsReport, Run};
use crate::graph::AffinityGraph;
use crate::lexical::InvertedIndex;
use crate::rankers::{BudgetLedger, CachedRanker, GradedOracle, LatentLinearOracle, Ranker};
use crate::scheduler::{bm25_first_stage, dense_first_stage, run_adaptive, run_hybrid, QueryContext, SchedulerConfig, SystemRun};
use crate::text::tokenize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum System {
    OreHybrid,
    OreAdaptive,
    Rrf,
    Cc,
    Rerank,
    Gar,
    Quam,
    Exhaustive,
}

impl System {
    pub const ALL: [System; 8] = [
        System::OreHybrid,
        System::OreAdaptive,
        System::Rrf,
        System::Cc,
        System::Rerank,
        System::Gar,
        System::Quam,
        System::Exhaustive,
    ];

    pub fn name(self) -> &'static str {
        match self {
            System::OreHybrid => "ore-hybrid",
            System::OreAdaptive => "ore-adaptive",
            System::Rrf => "rrf",
            System::Cc => "cc",
            System::Rerank => "rerank",
            System::Gar => "gar",
            System::Quam => "quam",
            System::Exhaustive => "exhaustive",
        }
    }

    /// Systems that need document embeddings.
    pub fn needs_dense(self) -> bool {
        matches!(self, System::OreHybrid | System::Rrf | System::Cc)
    }
}

impl fmt::Display for System {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for System {
    type Err = OreError;

    fn from_str(s: &str) -> Result<Self> {
        System::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| OreError::validation(format!("unknown system {s:?}")))
    }
}

/// Which expensive scorer stands in for the cross-encoder.
#[derive(Debug, Clone, PartialEq)]
pub enum RankerSpec {
    /// Judged grade plus Gaussian noise.
    Graded { sigma: f64 },
    /// Weighted sum of `[bm25, dense similarity]` plus Gaussian noise.
    Latent { sigma: f64, weights: Vec<f64> },
    /// Scores read from a `query_id doc_id score` file.
    Cached(PathBuf),
}

impl FromStr for RankerSpec {
    type Err = OreError;

    /// `graded:σ`, `latent`, `latent:σ` or `cached:path`.
    fn from_str(s: &str) -> Result<Self> {
        let (kind, arg) = s.split_once(':').unwrap_or((s, ""));
        let sigma = |a: &str, default: f64| -> Result<f64> {
            if a.is_empty() {
                return Ok(default);
            }
            a.parse::<f64>()
                .ok()
                .filter(|v| *v >= 0.0 && v.is_finite())
                .ok_or_else(|| OreError::validation(format!("bad noise level {a:?} in ranker spec {s:?}")))
        };
        match kind {
            "graded" => Ok(RankerSpec::Graded { sigma: sigma(arg, 0.25)? }),
            "latent" => Ok(RankerSpec::Latent {
                sigma: sigma(arg, 0.0)?,
                weights: vec![1.0, 1.0],
            }),
            "cached" if !arg.is_empty() => Ok(RankerSpec::Cached(PathBuf::from(arg))),
            _ => Err(OreError::validation(format!(
                "unknown ranker {s:?}; expected graded:σ, latent or cached:path"
            ))),
        }
    }
}

/// Everything a run reads, loaded once and shared across queries.
#[derive(Clone)]
pub struct Artifacts {
    pub queries: Vec<Query>,
    pub tokens: Vec<Vec<String>>,
    pub qrels: Arc<Qrels>,
    pub lex: Arc<InvertedIndex>,
    pub dense: Option<DenseScorer>,
    pub graph: Arc<AffinityGraph>,
    pub psi: Psi,
}

impl Artifacts {
    pub fn new(
        queries: Vec<Query>,
        qrels: Qrels,
        lex: InvertedIndex,
        dense: Option<DenseScorer>,
        graph: AffinityGraph,
        psi: Psi,
    ) -> Self {
        let tokens = queries.iter().map(|q| tokenize(&q.text)).collect();
        Self {
            queries,
            tokens,
            qrels: Arc::new(qrels),
            lex: Arc::new(lex),
            dense,
            graph: Arc::new(graph),
            psi,
        }
    }

    pub fn ranker(&self, spec: &RankerSpec, seed: u64) -> Result<Arc<dyn Ranker>> {
        Ok(match spec {
            RankerSpec::Graded { sigma } => Arc::new(GradedOracle::new(self.qrels.clone(), *sigma, seed)?),
            RankerSpec::Latent { sigma, weights } => {
                let dense = self
                    .dense
                    .clone()
                    .ok_or_else(|| OreError::validation("the latent ranker needs embeddings"))?;
                let lex = self.lex.clone();
                let tokens: HashMap<String, Vec<String>> = self
                    .queries
                    .iter()
                    .zip(&self.tokens)
                    .map(|(q, t)| (q.query_id.clone(), t.clone()))
                    .collect();
                let features = move |q: &str, d: &str| -> Result<Vec<f64>> {
                    let t = tokens
                        .get(q)
                        .ok_or_else(|| OreError::lookup(format!("unknown query {q}")))?;
                    Ok(vec![lex.bm25_qd(t, d)?, dense.sim_qd(q, d)?])
                };
                Arc::new(LatentLinearOracle::new(Box::new(features), weights.clone(), *sigma, seed)?)
            }
            RankerSpec::Cached(path) => Arc::new(CachedRanker::load(path)?),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunOptions {
    pub system: System,
    pub c: usize,
    pub b: usize,
    pub cb: usize,
    pub seed: u64,
    pub per_call_ms: f64,
    pub sched: SchedulerConfig,
    pub fusion: FusionConfig,
    pub exhaustive_cap: usize,
    pub allow_large: bool,
}

impl RunOptions {
    /// Defaults for everything except the system and budget.
    pub fn new(system: System, c: usize, b: usize, cb: usize) -> Self {
        Self {
            system,
            c,
            b,
            cb,
            seed: 0,
            per_call_ms: 50.0,
            sched: SchedulerConfig::default(),
            fusion: FusionConfig::default(),
            exhaustive_cap: 10_000,
            allow_large: false,
        }
    }

    pub fn ledger(&self) -> Result<BudgetLedger> {
        BudgetLedger::new(self.c, self.b, self.cb, self.per_call_ms)
    }

    fn sched(&self) -> SchedulerConfig {
        SchedulerConfig {
            seed: self.seed,
            ..self.sched.clone()
        }
    }
}

pub fn run_query(art: &Artifacts, opts: &RunOptions, ranker: &dyn Ranker, qi: usize) -> Result<SystemRun> {
    let query = &art.queries[qi];
    let tokens = &art.tokens[qi];
    let ctx = QueryContext {
        query_id: &query.query_id,
        tokens,
        ranker,
        psi: &art.psi,
    };
    let ledger = opts.ledger()?;
    let dense = || {
        art.dense
            .as_ref()
            .ok_or_else(|| OreError::validation(format!("system {} needs embeddings", opts.system)))
    };
    let depth = opts.sched.first_stage_depth;
    let lex = art.lex.as_ref();
    match opts.system {
        System::OreHybrid => run_hybrid(ctx, lex, dense()?, &opts.sched(), ledger),
        System::OreAdaptive => run_adaptive(ctx, lex, &art.graph, &opts.sched(), ledger),
        System::Rrf | System::Cc => {
            let lexical = bm25_first_stage(lex, tokens, depth);
            let semantic = dense_first_stage(dense()?, &query.query_id, depth)?;
            let mut fused = if opts.system == System::Rrf {
                rrf(&[&lexical, &semantic], opts.fusion.rrf_k)
            } else {
                cc_fuse(&lexical, &semantic, opts.fusion.cc_lambda)?
            };
            fused.truncate(opts.c);
            plain_rerank(ctx, &fused, ledger)
        }
        System::Rerank => plain_rerank(ctx, &bm25_first_stage(lex, tokens, opts.c), ledger),
        System::Gar => gar_style(ctx, &bm25_first_stage(lex, tokens, opts.c), &art.graph, ledger),
        System::Quam => quam_style(ctx, &bm25_first_stage(lex, tokens, opts.c), &art.graph, ledger, opts.sched.s),
        System::Exhaustive => exhaustive(
            ctx,
            lex.doc_ids(),
            opts.c,
            opts.b,
            opts.per_call_ms,
            opts.exhaustive_cap,
            opts.allow_large,
        ),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueryOutcome {
    pub query_id: String,
    pub run: SystemRun,
}

/// Run one system over every query, in parallel, in query order.
pub fn run_all(art: &Artifacts, opts: &RunOptions, ranker: &dyn Ranker) -> Result<Vec<QueryOutcome>> {
    if opts.system.needs_dense() && art.dense.is_none() {
        return Err(OreError::validation(format!("system {} needs embeddings", opts.system)));
    }
    opts.ledger()?;
    (0..art.queries.len())
        .into_par_iter()
        .map(|qi| {
            Ok(QueryOutcome {
                query_id: art.queries[qi].query_id.clone(),
                run: run_query(art, opts, ranker, qi)?,
            })
        })
        .collect()
}

pub fn to_run(outcomes: &[QueryOutcome]) -> Run {
    outcomes
        .iter()
        .map(|o| (o.query_id.clone(), o.run.ranked.clone()))
        .collect()
}

pub fn costs(outcomes: &[QueryOutcome]) -> BTreeMap<String, Cost> {
    outcomes
        .iter()
        .map(|o| {
            let d = &o.run.diagnostics;
            (o.query_id.clone(), (d.calls_used(), d.latency_ms()))
        })
        .collect()
}

pub fn report(system: &str, outcomes: &[QueryOutcome], qrels: &Qrels, ks: &[usize], min_grade: u8) -> MetricsReport {
    MetricsReport::build(system, &to_run(outcomes), &costs(outcomes), qrels, ks, min_grade)
}

pub fn run_file_entries(outcomes: &[QueryOutcome], tag: &str) -> Vec<RunEntry> {
    outcomes
        .iter()
        .flat_map(|o| run_entries(&o.query_id, &o.run.ranked, tag))
        .collect()
}

pub fn write_run_file(outcomes: &[QueryOutcome], tag: &str, path: impl AsRef<Path>) -> Result<()> {
    write_run(&run_file_entries(outcomes, tag), path)
}

fn create(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| OreError::io(parent, e))?;
    }
    let file = std::fs::File::create(path).map_err(|e| OreError::io(path, e))?;
    Ok(std::io::BufWriter::new(file))
}

fn write_lines(path: &Path, lines: impl IntoIterator<Item = String>) -> Result<()> {
    let mut w = create(path)?;
    for line in lines {
        writeln!(w, "{line}").map_err(|e| OreError::io(path, e))?;
    }
    w.flush().map_err(|e| OreError::io(path, e))
}

fn join(values: &[f64]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

/// One `batch` line per scored batch and one `summary` line per query, as
/// tab-separated `key=value` fields.
pub fn diagnostics_lines(outcomes: &[QueryOutcome]) -> Vec<String> {
    let mut lines = Vec::new();
    for o in outcomes {
        let d = &o.run.diagnostics;
        for b in &d.batches {
            lines.push(format!(
                "{}\tbatch\tindex={}\tsize={}\tcalls_used={}\tpool={}\terror={}\talpha={}",
                o.query_id,
                b.index,
                b.size,
                b.calls_used,
                b.pool_size,
                b.batch_error.map_or_else(|| "NA".to_string(), |e| e.to_string()),
                join(&b.alpha),
            ));
        }
        lines.push(format!(
            "{}\tsummary\tcalls_used={}\tbatch_calls={}\tlatency_ms={}\texhausted={}\tlimit={}",
            o.query_id,
            d.calls_used(),
            d.ledger.batch_calls,
            d.latency_ms(),
            d.exhausted,
            d.ledger.limit(),
        ));
    }
    lines
}

pub fn write_diagnostics(outcomes: &[QueryOutcome], path: impl AsRef<Path>) -> Result<()> {
    write_lines(path.as_ref(), diagnostics_lines(outcomes))
}

/// End-of-run features per pool member: normalized value and mask for
/// every feature, then the raw values.
pub fn write_features(outcomes: &[QueryOutcome], path: impl AsRef<Path>) -> Result<()> {
    let mut lines = Vec::new();
    let mut header_done = false;
    for o in outcomes {
        let d = &o.run.diagnostics;
        for ((doc, fv), raw) in d.final_features.iter().zip(&d.final_raw) {
            if !header_done {
                let names = fv.setup.feature_names();
                let mut cols = vec!["query_id".to_string(), "doc_id".to_string()];
                cols.extend(names.iter().map(|n| n.to_string()));
                cols.extend(names.iter().map(|n| format!("{n}_mask")));
                cols.extend(names.iter().map(|n| format!("{n}_raw")));
                lines.push(cols.join("\t"));
                header_done = true;
            }
            let mut cols = vec![o.query_id.clone(), doc.clone()];
            cols.extend(fv.values.iter().map(|v| v.to_string()));
            cols.extend(fv.mask.iter().map(|m| u8::from(*m).to_string()));
            cols.extend(raw.values.iter().map(|v| v.to_string()));
            lines.push(cols.join("\t"));
        }
    }
    write_lines(path.as_ref(), lines)
}

/// Per-batch alpha trajectory with the batch error.
pub fn write_alpha(outcomes: &[QueryOutcome], path: impl AsRef<Path>) -> Result<()> {
    let mut lines = vec!["query_id\tbatch\tcalls_used\terror\talpha".to_string()];
    for o in outcomes {
        for b in &o.run.diagnostics.batches {
            lines.push(format!(
                "{}\t{}\t{}\t{}\t{}",
                o.query_id,
                b.index,
                b.calls_used,
                b.batch_error.map_or_else(|| "NA".to_string(), |e| e.to_string()),
                join(&b.alpha)
            ));
        }
    }
    write_lines(path.as_ref(), lines)
}

/// Per-query rows followed by a `mean` row.
pub fn metrics_lines(report: &MetricsReport) -> Vec<String> {
    let ks: Vec<usize> = report.mean_recall.keys().copied().collect();
    let mut header = vec!["system".to_string(), "query_id".to_string()];
    header.extend(ks.iter().map(|k| format!("recall@{k}")));
    header.extend(ks.iter().map(|k| format!("ndcg@{k}")));
    header.extend(["calls_used".to_string(), "latency_ms".to_string()]);
    let mut lines = vec![header.join(",")];
    for (q, m) in &report.per_query {
        let mut row = vec![report.system.clone(), q.clone()];
        row.extend(ks.iter().map(|k| m.recall[k].to_string()));
        row.extend(ks.iter().map(|k| m.ndcg[k].to_string()));
        row.extend([m.calls_used.to_string(), m.latency_ms.to_string()]);
        lines.push(row.join(","));
    }
    let mut row = vec![report.system.clone(), "mean".to_string()];
    row.extend(ks.iter().map(|k| report.mean_recall[k].to_string()));
    row.extend(ks.iter().map(|k| report.mean_ndcg[k].to_string()));
    row.extend([report.mean_calls.to_string(), report.mean_latency_ms.to_string()]);
    lines.push(row.join(","));
    lines
}

pub fn write_metrics(report: &MetricsReport, path: impl AsRef<Path>) -> Result<()> {
    write_lines(path.as_ref(), metrics_lines(report))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub system: System,
    pub cb: usize,
    pub seed: u64,
    pub recall: f64,
    pub mean_calls: f64,
    pub mean_latency_ms: f64,
}

/// Recall@c, calls and latency for every (system, cb) pair; seeds are
/// handled by the caller since they usually change the artifacts too.
pub fn sweep(
    art: &Artifacts,
    base: &RunOptions,
    ranker: &dyn Ranker,
    systems: &[System],
    cbs: &[usize],
    min_grade: u8,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &system in systems {
        for &cb in cbs {
            let opts = RunOptions {
                system,
                cb,
                ..base.clone()
            };
            let outcomes = run_all(art, &opts, ranker)?;
            let r = report(system.name(), &outcomes, &art.qrels, &[opts.c], min_grade);
            rows.push(SweepRow {
                system,
                cb,
                seed: opts.seed,
                recall: r.mean_recall[&opts.c],
                mean_calls: r.mean_calls,
                mean_latency_ms: r.mean_latency_ms,
            });
        }
    }
    Ok(rows)
}

pub fn sweep_lines(rows: &[SweepRow], c: usize) -> Vec<String> {
    let mut lines = vec![format!("system,cb,seed,recall@{c},calls_used,latency_ms")];
    lines.extend(
        rows.iter()
            .map(|r| format!("{},{},{},{},{},{}", r.system, r.cb, r.seed, r.recall, r.mean_calls, r.mean_latency_ms)),
    );
    lines
}

pub fn write_sweep(rows: &[SweepRow], c: usize, path: impl AsRef<Path>) -> Result<()> {
    write_lines(path.as_ref(), sweep_lines(rows, c))
}

/// Rank lists keyed by query, convenient for comparing two runs.
pub fn ranked_by_query(outcomes: &[QueryOutcome]) -> BTreeMap<&str, &RankedList> {
    outcomes.iter().map(|o| (o.query_id.as_str(), &o.run.ranked)).collect()
}
