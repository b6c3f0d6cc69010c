//! Cost of attributing one peak, across window depths.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rca_bench::{last_step_event, permutation_settings, scoring_fixture};
use rca_core::attribution::attribute_event;

fn attribution(c: &mut Criterion) {
    let mut group = c.benchmark_group("attribute_event");
    group.sample_size(10);
    for lags in [0u32, 3, 7] {
        let (scm, trace) = scoring_fixture(lags);
        let event = last_step_event(&scm, &trace);
        group.bench_with_input(BenchmarkId::new("truncated", lags), &lags, |b, _| {
            b.iter(|| attribute_event(&scm, &event, permutation_settings(500, 50)).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, attribution);
criterion_main!(benches);
