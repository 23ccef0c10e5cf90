//! Resolve input paths and load everything a run needs.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use log::info;
use ore_core::corpus_io::{load_corpus, load_embeddings, load_qrels, load_queries, load_vectors};
use ore_core::dense::{DenseScorer, Metric, Psi};
use ore_core::engine::{Artifacts, System};
use ore_core::graph::{AffinityGraph, GraphKind};
use ore_core::lexical::{Bm25Params, InvertedIndex};
use ore_core::synth::{CORPUS_FILE, DOC_VECTORS_FILE, GRAPH_FILE, QRELS_FILE, QUERIES_FILE, QUERY_VECTORS_FILE};

use crate::error::{CliError, CliResult};
use crate::DataArgs;

pub const INDEX_FILE: &str = "index.bin";

/// Explicit path, else `dir/name` when that file exists.
fn resolve(explicit: &Option<PathBuf>, dir: &Option<PathBuf>, name: &str) -> Option<PathBuf> {
    explicit.clone().or_else(|| {
        dir.as_ref()
            .map(|d| d.join(name))
            .filter(|p| p.exists())
    })
}

fn required(p: Option<PathBuf>, what: &str, flag: &str) -> CliResult<PathBuf> {
    p.ok_or_else(|| CliError::usage(format!("no {what}: pass --{flag} or --data with {what} inside")))
}

fn timed<T>(what: &str, path: &Path, f: impl FnOnce() -> CliResult<T>) -> CliResult<T> {
    let t = Instant::now();
    let out = f()?;
    info!("loaded {what} from {} in {:.2?}", path.display(), t.elapsed());
    Ok(out)
}

pub fn load_index_or_build(index: Option<PathBuf>, corpus: Option<PathBuf>, bm25: Bm25Params) -> CliResult<InvertedIndex> {
    if let Some(p) = index {
        let mut idx = timed("index", &p, || Ok(InvertedIndex::load(&p)?))?;
        idx.set_params(bm25);
        return Ok(idx);
    }
    let p = required(corpus, "corpus or index", "corpus")?;
    let docs = timed("corpus", &p, || Ok(load_corpus(&p)?))?;
    let t = Instant::now();
    let idx = InvertedIndex::build(&docs, bm25)?;
    info!("indexed {} documents in {:.2?}", idx.n_docs(), t.elapsed());
    Ok(idx)
}

fn dense_scorer(docs: &Path, queries: Option<&Path>, metric: Metric) -> CliResult<DenseScorer> {
    let mut table = timed("document vectors", docs, || Ok(load_embeddings(docs)?))?;
    if let Some(q) = queries {
        let qv = timed("query vectors", q, || Ok(load_vectors(q)?))?;
        table = table.with_queries(qv)?;
    }
    Ok(DenseScorer::new(Arc::new(table), metric))
}

pub fn load(data: &DataArgs, bm25: Bm25Params, systems: &[System]) -> CliResult<Artifacts> {
    let dir = &data.data;
    let queries_path = required(resolve(&data.queries, dir, QUERIES_FILE), "queries", "queries")?;
    let qrels_path = required(resolve(&data.qrels, dir, QRELS_FILE), "qrels", "qrels")?;
    let queries = timed("queries", &queries_path, || Ok(load_queries(&queries_path)?))?;
    let qrels = timed("qrels", &qrels_path, || Ok(load_qrels(&qrels_path)?))?;
    let lex = load_index_or_build(resolve(&data.index, dir, INDEX_FILE), resolve(&data.corpus, dir, CORPUS_FILE), bm25)?;

    let metric: Metric = data.metric.as_deref().unwrap_or("dot").parse()?;
    let dense = match resolve(&data.embeddings, dir, DOC_VECTORS_FILE) {
        Some(p) => {
            let q = resolve(&data.query_embeddings, dir, QUERY_VECTORS_FILE);
            Some(dense_scorer(&p, q.as_deref(), metric)?)
        }
        None => None,
    };
    if dense.is_none() {
        if let Some(s) = systems.iter().find(|s| s.needs_dense()) {
            return Err(CliError::usage(format!("{s} needs document and query embeddings (--embeddings, --query-embeddings)")));
        }
    }

    let needs_graph = systems
        .iter()
        .any(|s| matches!(s, System::OreAdaptive | System::Gar | System::Quam));
    let graph = match resolve(&data.graph, dir, GRAPH_FILE) {
        Some(p) => timed("graph", &p, || Ok(AffinityGraph::load(&p, GraphKind::LearnedAffinity)?))?,
        None if needs_graph => {
            return Err(CliError::usage("graph-based systems need --graph (see `ore build-graph`)"));
        }
        None => AffinityGraph::empty(GraphKind::LearnedAffinity),
    };

    let psi = match data.psi.as_deref().unwrap_or("main") {
        "none" => Psi::Disabled,
        "main" => match &dense {
            Some(d) => Psi::Main(d.clone()),
            None => Psi::Disabled,
        },
        path => {
            let q = data
                .psi_queries
                .as_deref()
                .ok_or_else(|| CliError::usage("a separate --psi table needs --psi-queries"))?;
            Psi::Separate(dense_scorer(Path::new(path), Some(q), metric)?)
        }
    };
    Ok(Artifacts::new(queries, qrels, lex, dense, graph, psi))
}
