use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use convsplat_bench::raster_scene;
use convsplat_core::raster::bench::bench_camera;
use convsplat_core::{render_reference, render_tiled, Channels, RenderOptions};

fn rasterizers(c: &mut Criterion) {
    let mut group = c.benchmark_group("render");
    group.sample_size(10);
    for (n, res) in [(1_000, 128), (10_000, 128), (10_000, 256)] {
        let g = raster_scene(n);
        let cam = bench_camera(res);
        let opts = RenderOptions::new(Channels::FEATURES);
        let id = format!("{n}@{res}");
        group.bench_with_input(BenchmarkId::new("tiled", &id), &(), |b, _| {
            b.iter(|| render_tiled(&g, &cam, opts).unwrap())
        });
        if n <= 1_000 {
            group.bench_with_input(BenchmarkId::new("reference", &id), &(), |b, _| {
                b.iter(|| render_reference(&g, &cam, opts).unwrap())
            });
        }
    }
    group.finish();
}

criterion_group!(benches, rasterizers);
criterion_main!(benches);
