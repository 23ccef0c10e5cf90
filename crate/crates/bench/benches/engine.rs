use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use ore_bench::fixture;
use ore_core::engine::{run_query, RankerSpec, RunOptions, System};
use ore_core::estimator::EstimatorState;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn lexical(c: &mut Criterion) {
    let art = fixture(2000, 20, 0);
    c.bench_function("bm25_search_top1000", |bench| {
        bench.iter(|| {
            for toks in &art.tokens {
                black_box(art.lex.search(toks, 1000));
            }
        })
    });
}

fn schedulers(c: &mut Criterion) {
    let art = fixture(2000, 20, 0);
    let ranker = art.ranker(&RankerSpec::Graded { sigma: 0.25 }, 0).unwrap();
    let mut group = c.benchmark_group("run_query");
    for system in [System::Rerank, System::OreAdaptive, System::Gar, System::OreHybrid] {
        let opts = RunOptions::new(system, 100, 16, 7);
        group.bench_function(system.name(), |bench| {
            bench.iter(|| black_box(run_query(&art, &opts, ranker.as_ref(), 3).unwrap()))
        });
    }
    group.finish();
}

fn estimator(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let batch: Vec<(Vec<f64>, f64)> = (0..16)
        .map(|_| ((0..4).map(|_| rng.random::<f64>()).collect(), rng.random::<f64>()))
        .collect();
    c.bench_function("estimator_observe_batch16_dim4", |bench| {
        bench.iter_batched(
            || EstimatorState::init(4, 1.0, 0).unwrap(),
            |mut est| {
                est.observe_raw(batch.iter().map(|(x, y)| (x.as_slice(), *y))).unwrap();
                est
            },
            BatchSize::SmallInput,
        )
    });
}

criterion_group!(benches, lexical, schedulers, estimator);
criterion_main!(benches);
