//! Sequential vs rayon execution of the per-record hot paths.
//!
//! Build with `--no-default-features` to compare against a binary without rayon at all;
//! in that build both arms run sequentially.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use topk_uncert::aggregation::{AggregationOptions, StrategyId};
use topk_uncert::report::evaluate_records;
use topk_uncert::synthgen::{generate_with_truth, GeneratorConfig};
use topk_uncert::Exec;

fn config(n: usize) -> GeneratorConfig {
    GeneratorConfig {
        vocab_size: 60,
        n_samples: n,
        m_runs: 5,
        k: 10,
        concentration: 3.0,
        decode_temperature: 0.8,
        confidence_bias: 0.0,
        seed: 1,
    }
}

const MODES: [(&str, Exec); 2] = [
    ("sequential", Exec::Sequential),
    ("parallel", Exec::Parallel),
];

fn bench_generate(c: &mut Criterion) {
    let mut g = c.benchmark_group("generate");
    g.sample_size(20);
    let cfg = config(2000);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::new(name, cfg.n_samples), |b| {
            b.iter(|| generate_with_truth(black_box(&cfg), exec).unwrap())
        });
    }
    g.finish();
}

fn bench_aggregate(c: &mut Criterion) {
    let (ds, _) = generate_with_truth(&config(2000), Exec::Parallel).unwrap();
    let opts = AggregationOptions::default();
    let mut g = c.benchmark_group("aggregate");
    g.sample_size(20);
    for strategy in [StrategyId::Consistency, StrategyId::PairRank] {
        for (name, exec) in MODES {
            g.bench_function(BenchmarkId::new(name, strategy.as_str()), |b| {
                b.iter(|| evaluate_records(black_box(&ds), strategy, 10, &opts, exec).unwrap())
            });
        }
    }
    g.finish();
}

criterion_group!(benches, bench_generate, bench_aggregate);
criterion_main!(benches);
