use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use dglm_core::{normalize_log_weights, Resampler};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn resamplers(c: &mut Criterion) {
    let mut group = c.benchmark_group("resample");
    for n in [1_000usize, 10_000, 100_000] {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let log_w: Vec<f64> = (0..n).map(|_| 4.0 * rng.random::<f64>()).collect();
        let w = normalize_log_weights(&log_w).unwrap();
        for (name, r) in [
            ("multinomial", Resampler::Multinomial),
            ("stratified", Resampler::Stratified),
            ("systematic", Resampler::Systematic),
        ] {
            group.bench_with_input(BenchmarkId::new(name, n), &w, |b, w| b.iter(|| r.resample(w, &mut rng)));
        }
    }
    group.finish();
}

criterion_group!(benches, resamplers);
criterion_main!(benches);
