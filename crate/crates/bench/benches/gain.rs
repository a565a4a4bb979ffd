use std::hint::black_box;

use apd_core::avalanche::{sample_gain_histogram, AvalancheConfig};
use apd_core::gain::{mcintyre_pmf, mcintyre_term};
use apd_core::{McIntyreParams, TruncationPolicy};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};

fn pmf(c: &mut Criterion) {
    let mut g = c.benchmark_group("mcintyre_pmf");
    for m in [3.7, 13.2, 20.0] {
        let p = McIntyreParams::new(0.9218, m).unwrap();
        g.bench_with_input(BenchmarkId::from_parameter(m), &p, |b, p| {
            b.iter(|| mcintyre_pmf(black_box(*p), &TruncationPolicy::default()).unwrap())
        });
    }
    g.finish();

    let p = McIntyreParams::new(0.9218, 13.2).unwrap();
    let mut g = c.benchmark_group("mcintyre_term");
    for m in [10usize, 64, 65, 1000] {
        g.bench_with_input(BenchmarkId::from_parameter(m), &m, |b, &m| b.iter(|| mcintyre_term(p, black_box(m))));
    }
    g.finish();
}

fn monte_carlo(c: &mut Criterion) {
    let mut g = c.benchmark_group("monte_carlo");
    g.sample_size(10);
    let trials = 100_000;
    g.throughput(Throughput::Elements(trials));
    for m in [3.7, 13.2] {
        let cfg = AvalancheConfig::for_mean_gain(0.9218, m, 1).unwrap();
        g.bench_with_input(BenchmarkId::from_parameter(m), &cfg, |b, cfg| {
            b.iter(|| sample_gain_histogram(cfg, trials).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, pmf, monte_carlo);
criterion_main!(benches);
