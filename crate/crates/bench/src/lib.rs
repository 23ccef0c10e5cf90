//! Shared fixtures for the benchmarks.

use std::sync::Arc;

use ore_core::corpus_io::EmbeddingTable;
use ore_core::dense::{DenseScorer, Metric, Psi};
use ore_core::engine::Artifacts;
use ore_core::lexical::{Bm25Params, InvertedIndex};
use ore_core::synth::{generate, SynthSpec};

/// One synthetic collection with every artifact loaded.
pub fn fixture(n_docs: usize, n_queries: usize, seed: u64) -> Artifacts {
    let data = generate(&SynthSpec {
        n_docs,
        n_queries,
        seed,
        ..SynthSpec::default()
    })
    .expect("synthetic spec");
    let lex = InvertedIndex::build(&data.corpus, Bm25Params::default()).expect("index");
    let table = EmbeddingTable::new(data.doc_vectors)
        .with_queries(data.query_vectors)
        .expect("query vectors");
    let dense = DenseScorer::new(Arc::new(table), Metric::Dot);
    Artifacts::new(data.queries, data.qrels, lex, Some(dense.clone()), data.graph, Psi::Main(dense))
}
