use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use pcsr_bench::{Fixture, SIGMA};
use pcsr_core::finetune::finetune_region;
use pcsr_core::forward::pci_measure;
use pcsr_core::recon::{gi_reconstruct, tv_reconstruct};
use pcsr_core::{FinetuneConfig, GiVariant, NoiseConfig, TvConfig, UNetConfig};

fn physics(c: &mut Criterion) {
    let mut g = c.benchmark_group("physics");
    for size in [32, 64] {
        let f = Fixture::new(size, UNetConfig { base_channels: 4, depth: 2 }, 1, 0).unwrap();
        let noise = NoiseConfig::new(SIGMA, 3);
        g.bench_with_input(BenchmarkId::new("measure", size), &f, |b, f| {
            b.iter(|| pci_measure(&f.otf, &f.expanded, &f.images[0], &noise).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("gi", size), &f, |b, f| {
            b.iter(|| gi_reconstruct(&f.otf, &f.expanded, &f.set.frames, GiVariant::Uncentered).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("otf_apply", size), &f, |b, f| b.iter(|| f.otf.apply(f.images[0].data())));
    }
    g.finish();
}

fn classic(c: &mut Criterion) {
    let f = Fixture::new(32, UNetConfig { base_channels: 4, depth: 2 }, 1, 0).unwrap();
    let cfg = TvConfig { max_iters: 50, tol: 0.0, ..TvConfig::default() };
    let mut g = c.benchmark_group("tv");
    g.sample_size(20);
    g.bench_function("tv_50_iters_32", |b| b.iter(|| tv_reconstruct(&f.otf, &f.expanded, &f.set.frames, &cfg).unwrap()));
    g.finish();
}

fn network(c: &mut Criterion) {
    let f = Fixture::new(32, UNetConfig::default(), 15, 0).unwrap();
    let mut g = c.benchmark_group("network");
    g.sample_size(10);
    g.bench_function("unet_forward_32", |b| b.iter(|| f.params.predict(&f.gi).unwrap()));
    g.bench_function("train_step_batch15_32", |b| b.iter(|| f.train_step_loss().unwrap()));
    let ft = FinetuneConfig { max_steps: 10, tol: 0.0, ..FinetuneConfig::default() };
    g.bench_function("finetune_10_steps_32", |b| {
        b.iter(|| finetune_region(&f.params, &f.masks, &f.otf, &f.set, &ft).unwrap())
    });
    g.finish();
}

criterion_group!(benches, physics, classic, network);
criterion_main!(benches);
