//! Sequential versus rayon execution of the data-parallel hot loops.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use faudit_core::explainers::{rise_raw, RiseConfig};
use faudit_core::models::train::{predict_labels, train, TrainConfig};
use faudit_core::models::{Arch, CnnConfig};
use faudit_core::synthwafer::{generate_with, DatasetSpec, SplitCounts};
use faudit_core::{Exec, Model};

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn small_set() -> Vec<faudit_core::synthwafer::WaferSample> {
    let counts = SplitCounts { train: 8, val: 0, test: 0 };
    generate_with(&DatasetSpec::uniform(counts, 0.02, 1), Exec::Sequential).unwrap()
}

fn bench_generate(c: &mut Criterion) {
    let spec = DatasetSpec::uniform(SplitCounts { train: 40, val: 0, test: 0 }, 0.05, 3);
    let mut g = c.benchmark_group("generate_200");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| generate_with(&spec, exec).unwrap()));
    }
    g.finish();
}

fn bench_rise(c: &mut Criterion) {
    let model = Model::new(&Arch::Cnn(CnnConfig::default()), 0).unwrap();
    let image = small_set()[0].image.clone();
    let cfg = RiseConfig {
        n_masks: 100,
        ..RiseConfig::default()
    };
    let mut g = c.benchmark_group("rise_100_masks");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| rise_raw(&model, &image, 0, &cfg, exec).unwrap())
        });
    }
    g.finish();
}

fn bench_predict(c: &mut Criterion) {
    let model = Model::new(&Arch::Cnn(CnnConfig::default()), 0).unwrap();
    let samples = small_set();
    let images: Vec<_> = samples.iter().map(|s| &s.image).collect();
    let mut g = c.benchmark_group("predict_40");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| predict_labels(&model, &images, exec).unwrap())
        });
    }
    g.finish();
}

fn bench_train_epoch(c: &mut Criterion) {
    let samples = small_set();
    let set: Vec<_> = samples.iter().map(|s| (&s.image, s.label.index())).collect();
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 20,
        ..TrainConfig::default()
    };
    let mut g = c.benchmark_group("train_epoch_40");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                let mut model = Model::new(&Arch::Cnn(CnnConfig::default()), 0).unwrap();
                train(&mut model, &set, &set[..5], &cfg, exec).unwrap()
            })
        });
    }
    g.finish();
}

criterion_group!(benches, bench_generate, bench_rise, bench_predict, bench_train_epoch);
criterion_main!(benches);
