use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use demo_core::data::{generate_synthetic, LoadedDataset, SynthSpec};
use demo_core::evaluation::{evaluate, EvalOptions};
use demo_core::model::{build_model, ModelConfig};
use demo_core::parallel;
use demo_core::trainer::extract_features;

fn bench(c: &mut Criterion) {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        num_identities: 16,
        instances_per_identity: 8,
        ..SynthSpec::default()
    };
    generate_synthetic(&spec, dir.path()).unwrap();
    let data = LoadedDataset::open(dir.path()).unwrap();
    let model = build_model(&ModelConfig::toy(), 16).unwrap();
    let all: Vec<usize> = (0..data.len()).collect();
    let feats = extract_features(&model, &data, &all, &[], 16).unwrap();

    for (label, on) in [("parallel", true), ("sequential", false)] {
        let mut group = c.benchmark_group(label);
        group.sample_size(10);
        parallel::set_enabled(on);
        group.bench_function("extract_features/128", |b| {
            b.iter(|| extract_features(black_box(&model), &data, &all, &[], 16).unwrap())
        });
        group.bench_function("evaluate/128x128", |b| {
            b.iter(|| evaluate(black_box(&feats), &feats, &EvalOptions::default()).unwrap())
        });
        group.finish();
    }
    parallel::set_enabled(true);
}

criterion_group!(benches, bench);
criterion_main!(benches);
