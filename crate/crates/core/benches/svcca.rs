//! Pool-parallel versus single-thread runs of the parallel hot spots, and the
//! frequency-block path against dense SVCCA on the same conv layers.
//!
//! Build with `--no-default-features` to time the sequential fallback itself.

use std::hint::black_box;
use std::time::Duration;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use svcca_core::analysis::{self, CompareOptions};
use svcca_core::cca::ActivationMatrix;
use svcca_core::convdft::{self, DftMode};
use svcca_core::fixtures::gaussian;
use svcca_core::par;
use svcca_core::toynet::{LayerActs, LayerRecord};

fn dense_layers(count: usize, width: usize, d: usize) -> Vec<LayerRecord> {
    (0..count)
        .map(|i| LayerRecord {
            name: format!("layer{}", i + 1),
            acts: LayerActs::Dense(ActivationMatrix::new(gaussian(width, d, i as u64)).unwrap()),
        })
        .collect()
}

fn grid(c: &mut Criterion) {
    let layers = dense_layers(6, 48, 600);
    let opts = CompareOptions::default();
    let mut g = c.benchmark_group("similarity_grid_6x6");
    g.sample_size(10).measurement_time(Duration::from_secs(10));
    g.bench_function("pool", |b| {
        b.iter(|| analysis::similarity_grid(black_box(&layers), &layers, true, &opts).unwrap())
    });
    g.bench_function("one_thread", |b| {
        b.iter(|| par::with_threads(1, || analysis::similarity_grid(black_box(&layers), &layers, true, &opts).unwrap()))
    });
    g.finish();
}

fn block_vs_dense(c: &mut Criterion) {
    let mut g = c.benchmark_group("conv_svcca");
    g.sample_size(10).measurement_time(Duration::from_secs(10));
    for (n, ch) in [(8usize, 4usize), (8, 8)] {
        let fx = convdft::translation_fixture(n, ch, 2, true, 1).unwrap();
        let id = format!("n{n}_c{ch}");
        g.bench_with_input(BenchmarkId::new("block_pool", &id), &fx, |b, fx| {
            b.iter(|| convdft::dft_cca(&fx.layer1, &fx.layer2, 0.99, DftMode::Exact).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("block_one_thread", &id), &fx, |b, fx| {
            b.iter(|| par::with_threads(1, || convdft::dft_cca(&fx.layer1, &fx.layer2, 0.99, DftMode::Exact).unwrap()))
        });
        g.bench_with_input(BenchmarkId::new("dense", &id), &fx, |b, fx| {
            b.iter(|| convdft::dense_conv_svcca(&fx.layer1, &fx.layer2, 0.99, None).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, grid, block_vs_dense);
criterion_main!(benches);
