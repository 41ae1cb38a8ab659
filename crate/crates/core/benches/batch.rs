//! Rayon-backed batch runners against their sequential counterparts.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use manet_core::batch::{fuzz_trials, fuzz_trials_sequential, map, map_sequential, run_and_audit};
use manet_core::sim::gen::random_benign;

fn fuzz(c: &mut Criterion) {
    let mut g = c.benchmark_group("fuzz_trials");
    g.sample_size(10);
    for n in [64u64, 256] {
        g.bench_with_input(BenchmarkId::new("parallel", n), &n, |b, &n| {
            b.iter(|| fuzz_trials(0, n, true))
        });
        g.bench_with_input(BenchmarkId::new("sequential", n), &n, |b, &n| {
            b.iter(|| fuzz_trials_sequential(0, n, true))
        });
    }
    g.finish();
}

fn scenarios(c: &mut Criterion) {
    let scs: Vec<_> = (0..16).map(|s| random_benign(s, 12)).collect();
    let mut g = c.benchmark_group("run_and_audit");
    g.sample_size(10);
    g.bench_function("parallel", |b| b.iter(|| map(&scs, |s| run_and_audit(s).is_ok())));
    g.bench_function("sequential", |b| {
        b.iter(|| map_sequential(&scs, |s| run_and_audit(s).is_ok()))
    });
    g.finish();
}

criterion_group!(benches, fuzz, scenarios);
criterion_main!(benches);
