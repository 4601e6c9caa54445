use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use vetime_core::autograd::Tape;
use vetime_core::imaging::{convert, DEFAULT_KERNEL};
use vetime_core::metrics::vus_pr;
use vetime_core::model::{ModelConfig, VetimeModel};
use vetime_core::series::MultivariateSeries;
use vetime_core::synthetic::{generate_series, GeneratorConfig};

fn sample(len: usize) -> vetime_core::series::LabeledSeries {
    let cfg = GeneratorConfig {
        n_series: 1,
        length_range: [len, len],
        ..Default::default()
    };
    generate_series(&cfg, 0).unwrap().series
}

fn bench_convert(c: &mut Criterion) {
    let mut g = c.benchmark_group("convert");
    for len in [256, 1024, 4096] {
        let s = sample(len).series;
        g.bench_with_input(BenchmarkId::from_parameter(len), &s, |b, s| {
            b.iter(|| convert(black_box(s), 16, DEFAULT_KERNEL).unwrap())
        });
    }
    g.finish();
}

fn bench_vus_pr(c: &mut Criterion) {
    let mut g = c.benchmark_group("vus_pr");
    for len in [1000, 10_000] {
        let s = sample(len);
        let scores: Vec<f64> = s.series.values().iter().map(|v| v.abs()).collect();
        g.bench_with_input(BenchmarkId::from_parameter(len), &(scores, s.labels), |b, (sc, y)| {
            b.iter(|| vus_pr(black_box(sc), black_box(y), None).unwrap())
        });
    }
    g.finish();
}

fn bench_forward(c: &mut Criterion) {
    let model = VetimeModel::new(ModelConfig::default()).unwrap();
    let s: MultivariateSeries = sample(512).into();
    let prepared = model.prepare(&s).unwrap();
    let mut g = c.benchmark_group("forward");
    g.sample_size(20);
    g.bench_function("infer_512", |b| b.iter(|| model.infer_prepared(black_box(&prepared)).unwrap()));
    g.bench_function("loss_and_backward_512", |b| {
        b.iter(|| {
            let mut t = Tape::new(&model.store);
            let fv = model.forward(&mut t, &prepared, true).unwrap();
            let (loss, _) = model.loss(&mut t, &prepared, &fv).unwrap();
            t.backward(loss)
        })
    });
    g.finish();
}

criterion_group!(benches, bench_convert, bench_vus_pr, bench_forward);
criterion_main!(benches);
