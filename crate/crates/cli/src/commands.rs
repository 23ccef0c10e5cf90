use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use log::info;
use ore_core::corpus_io::{load_corpus, load_qrels, load_run, load_vectors, sort_ranked};
use ore_core::dense::{DenseScorer, Metric};
use ore_core::engine::{
    report, run_all, sweep, write_alpha, write_diagnostics, write_features, write_metrics, write_run_file, write_sweep,
    System,
};
use ore_core::eval::{MetricsReport, Run};
use ore_core::graph::{AffinityGraph, GraphSource};
use ore_core::lexical::InvertedIndex;
use ore_core::synth::{generate, SynthSpec};
use ore_core::corpus_io::EmbeddingTable;
use ore_core::OreError;

use crate::error::{CliError, CliResult};
use crate::inputs::{self, INDEX_FILE};
use crate::settings::Settings;
use crate::{BuildGraphArgs, BuildIndexArgs, Cli, Command, EvalArgs, GraphFrom, RunArgs, SweepArgs, SynthArgs};

pub const RUN_FILE: &str = "run.trec";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.tsv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const FEATURES_FILE: &str = "features.tsv";
pub const ALPHA_FILE: &str = "alpha.tsv";

pub fn dispatch(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.jobs {
        if n == 0 {
            return Err(CliError::usage("--jobs must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::usage(format!("cannot set up {n} worker threads: {e}")))?;
    }
    let settings = Settings::load(cli.config.as_ref())?;
    match cli.command {
        Command::BuildIndex(a) => build_index(&settings, a),
        Command::BuildGraph(a) => build_graph(&settings, a),
        Command::Synth(a) => synth(a),
        Command::Run(a) => run(&settings, a),
        Command::Eval(a) => eval(a),
        Command::Sweep(a) => sweep_cmd(&settings, a),
    }
}

fn build_index(settings: &Settings, a: BuildIndexArgs) -> CliResult<()> {
    let params = settings.bm25(a.k1, a.bm25_b)?;
    let docs = load_corpus(&a.corpus)?;
    let t = Instant::now();
    let idx = InvertedIndex::build(&docs, params)?;
    idx.save(&a.out)?;
    println!("indexed {} documents in {:.2?} -> {}", idx.n_docs(), t.elapsed(), a.out.display());
    Ok(())
}

fn build_graph(settings: &Settings, a: BuildGraphArgs) -> CliResult<()> {
    if a.k == 0 {
        return Err(OreError::Validation("graph degree k must be at least 1".into()).into());
    }
    let t = Instant::now();
    let graph = match a.from {
        GraphFrom::Lexical => {
            let idx = inputs::load_index_or_build(a.index.clone(), a.corpus.clone(), settings.bm25(None, None)?)?;
            let ids = idx.doc_ids().to_vec();
            AffinityGraph::build(GraphSource::Lexical(&idx), &ids, a.k)?
        }
        GraphFrom::Semantic => {
            let path = a
                .embeddings
                .as_ref()
                .ok_or_else(|| CliError::usage("semantic graphs need --embeddings"))?;
            let metric: Metric = a.metric.parse()?;
            let table = load_vectors(path)?;
            let ids = table.ids().to_vec();
            let scorer = DenseScorer::new(Arc::new(EmbeddingTable::new(table)), metric);
            AffinityGraph::build(GraphSource::Dense(&scorer), &ids, a.k)?
        }
    };
    graph.save(&a.out)?;
    println!(
        "graph with {} edges (k={}) in {:.2?} -> {}",
        graph.edge_count(),
        a.k,
        t.elapsed(),
        a.out.display()
    );
    Ok(())
}

fn synth(a: SynthArgs) -> CliResult<()> {
    let d = SynthSpec::default();
    let spec = SynthSpec {
        seed: a.seed.unwrap_or(d.seed),
        n_docs: a.n_docs.unwrap_or(d.n_docs),
        n_queries: a.n_queries.unwrap_or(d.n_queries),
        clusters_per_query: a.clusters_per_query.unwrap_or(d.clusters_per_query),
        cluster_size: a.cluster_size.unwrap_or(d.cluster_size),
        visible_fraction: a.visible_fraction.unwrap_or(d.visible_fraction),
        vocab_size: a.vocab_size.unwrap_or(d.vocab_size),
        embedding_dim: a.embedding_dim.unwrap_or(d.embedding_dim),
        graph_k: a.graph_k.unwrap_or(d.graph_k),
        ..d
    };
    let data = generate(&spec)?;
    data.write(&a.out)?;
    if a.index {
        InvertedIndex::build(&data.corpus, Default::default())?.save(a.out.join(INDEX_FILE))?;
    }
    println!(
        "wrote {} documents, {} queries, {} judgments to {}",
        data.corpus.len(),
        data.queries.len(),
        data.qrels.len(),
        a.out.display()
    );
    Ok(())
}

fn run(settings: &Settings, a: RunArgs) -> CliResult<()> {
    let system = settings.system(a.system.as_ref())?;
    let opts = settings.options(system, &a.tune, a.cb)?;
    let ranker_spec = settings.ranker(&a.tune)?;
    let min_grade = settings.min_grade(&a.tune)?;
    let tag = settings.tag(a.tag.as_ref(), system)?;
    let data = settings.data(&a.data)?;
    let art = inputs::load(&data, settings.bm25(None, None)?, &[system])?;
    let ranker = art.ranker(&ranker_spec, opts.seed)?;

    let t = Instant::now();
    let outcomes = run_all(&art, &opts, ranker.as_ref())?;
    info!("{} over {} queries in {:.2?}", system, outcomes.len(), t.elapsed());

    let ks: Vec<usize> = BTreeSet::from_iter(a.k.iter().copied().chain([opts.c])).into_iter().collect();
    let rep = report(&tag, &outcomes, &art.qrels, &ks, min_grade);
    write_run_file(&outcomes, &tag, a.out.join(RUN_FILE))?;
    write_diagnostics(&outcomes, a.out.join(DIAGNOSTICS_FILE))?;
    write_metrics(&rep, a.out.join(METRICS_FILE))?;
    if a.dump_features {
        write_features(&outcomes, a.out.join(FEATURES_FILE))?;
    }
    if a.dump_alpha {
        write_alpha(&outcomes, a.out.join(ALPHA_FILE))?;
    }
    println!(
        "{} queries={} recall@{}={:.4} calls_used={} latency_ms={}",
        tag,
        rep.per_query.len(),
        opts.c,
        rep.mean_recall[&opts.c],
        rep.mean_calls,
        rep.mean_latency_ms
    );
    Ok(())
}

fn run_from_file(path: &Path) -> CliResult<(Run, String)> {
    let entries = load_run(path)?;
    let tag = entries.first().map(|e| e.tag.clone()).unwrap_or_else(|| "run".into());
    let mut run: Run = BTreeMap::new();
    for e in entries {
        run.entry(e.query_id).or_default().push((e.doc_id, e.score));
    }
    for list in run.values_mut() {
        sort_ranked(list);
    }
    Ok((run, tag))
}

fn eval(a: EvalArgs) -> CliResult<()> {
    if a.k.contains(&0) {
        return Err(OreError::Validation("cutoffs must be positive".into()).into());
    }
    let (run, tag) = run_from_file(&a.run)?;
    let qrels = load_qrels(&a.qrels)?;
    let rep = MetricsReport::build(&tag, &run, &BTreeMap::new(), &qrels, &a.k, a.min_grade);
    let lines = ore_core::engine::metrics_lines(&rep);
    match &a.out {
        Some(p) => write_metrics(&rep, p)?,
        None => {
            let mut out = std::io::stdout().lock();
            for l in lines {
                writeln!(out, "{l}").map_err(|e| CliError::usage(format!("cannot write to stdout: {e}")))?;
            }
        }
    }
    Ok(())
}

fn sweep_cmd(settings: &Settings, a: SweepArgs) -> CliResult<()> {
    let systems: Vec<System> = a.systems.iter().map(|s| s.parse()).collect::<Result<_, _>>()?;
    if systems.is_empty() {
        return Err(CliError::usage("--systems is empty"));
    }
    let base = settings.options(systems[0], &a.tune, None)?;
    let cbs: Vec<usize> = if a.cbs.is_empty() { (1..=base.cb).collect() } else { a.cbs.clone() };
    for &cb in &cbs {
        ore_core::rankers::BudgetLedger::new(base.c, base.b, cb, base.per_call_ms)?;
    }
    let seeds = if a.seeds.is_empty() { vec![base.seed] } else { a.seeds.clone() };
    let ranker_spec = settings.ranker(&a.tune)?;
    let min_grade = settings.min_grade(&a.tune)?;
    let data = settings.data(&a.data)?;
    let art = inputs::load(&data, settings.bm25(None, None)?, &systems)?;

    let mut rows = Vec::new();
    for seed in seeds {
        let opts = ore_core::engine::RunOptions { seed, ..base.clone() };
        let ranker = art.ranker(&ranker_spec, seed)?;
        rows.extend(sweep(&art, &opts, ranker.as_ref(), &systems, &cbs, min_grade)?);
    }
    write_sweep(&rows, base.c, &a.out)?;
    println!("{} rows -> {}", rows.len(), a.out.display());
    Ok(())
}
