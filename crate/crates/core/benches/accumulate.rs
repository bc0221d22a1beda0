use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fwls::gram::parallel_accumulate;
use fwls::{solve, GramState, StackedDataset};

fn dataset(n: usize, l: usize, m: usize) -> StackedDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let g: Vec<f64> = (0..n * l).map(|_| rng.random_range(1.0..5.0)).collect();
    let f: Vec<f64> = (0..n * m)
        .map(|k| if k % m == 0 { 1.0 } else { rng.random_range(-1.0..1.0) })
        .collect();
    let y: Vec<f64> = (0..n).map(|_| rng.random_range(1.0..5.0)).collect();
    StackedDataset::new(y, g, l, f, m).unwrap()
}

fn accumulate(c: &mut Criterion) {
    let ds = dataset(50_000, 8, 8);
    let mut group = c.benchmark_group("accumulate");
    group.sample_size(10);
    group.throughput(Throughput::Elements(ds.n_rows() as u64));
    group.bench_function("sequential", |b| b.iter(|| GramState::from_dataset(&ds)));
    for workers in [1, 2, 4, 8] {
        group.bench_with_input(BenchmarkId::new("parallel", workers), &workers, |b, &w| {
            b.iter(|| parallel_accumulate(&ds, w).unwrap())
        });
    }
    group.finish();
}

fn solve_dim(c: &mut Criterion) {
    let mut group = c.benchmark_group("solve");
    group.sample_size(10);
    for (l, m) in [(4, 4), (8, 8), (10, 26)] {
        let gs = GramState::from_dataset(&dataset(4 * l * m + 100, l, m));
        group.bench_with_input(BenchmarkId::from_parameter(l * m), &gs, |b, gs| {
            b.iter(|| solve(gs, 1e-3).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, accumulate, solve_dim);
criterion_main!(benches);
