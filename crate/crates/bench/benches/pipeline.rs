use criterion::{criterion_group, criterion_main, Criterion};

use convsplat_bench::{encoder_fixture, training_fixture};
use convsplat_core::encoder::{EncoderConfig, Level};

fn encoder(c: &mut Criterion) {
    let mut group = c.benchmark_group("encode");
    group.sample_size(20);
    for (name, cfg) in [
        ("desk", EncoderConfig { mid_dim: 32, token_dim: 16, ..EncoderConfig::default() }),
        ("default", EncoderConfig::default()),
    ] {
        let (enc, map) = encoder_fixture(224, cfg);
        group.bench_function(name, |b| b.iter(|| enc.forward(&map, Level::View).unwrap()));
    }
    group.finish();
}

fn training(c: &mut Criterion) {
    let (mut session, teacher) = training_fixture(112);
    let mut group = c.benchmark_group("gradients");
    group.sample_size(10);
    group.bench_function("identity", |b| b.iter(|| session.identity_gradients(&[0]).unwrap()));
    group.bench_function("language", |b| {
        b.iter(|| session.language_gradients(&teacher, &[0]).unwrap())
    });
    group.finish();
}

criterion_group!(benches, encoder, training);
criterion_main!(benches);
