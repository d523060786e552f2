use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use maelre::encoder::{EncoderConfig, Model, StemSpec};
use maelre::par::Execution;
use maelre::train::{evaluate, generate, TaskSpec};

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn batch_inference(c: &mut Criterion) {
    let spec = TaskSpec::freq1d(6, 3750, 1.0);
    let data = generate(&spec, 0, 0, 32, Execution::Sequential).unwrap();
    let stem = StemSpec::Seq1D { length: 3750, in_channels: 1, kernel: 15, stride: 15 };
    let mut cfg = EncoderConfig::custom(vec![1, 1, 2, 1], 32, vec![1, 2, 4, 8], stem, 6);
    cfg.mlp_ratio = 2;
    let model = Model::<f32>::build(&cfg, 0).unwrap();
    let mut group = c.benchmark_group("evaluate_32_samples");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| evaluate(&model, &data, exec).unwrap())
        });
    }
    group.finish();
}

fn data_generation(c: &mut Criterion) {
    let spec = TaskSpec::freq1d(6, 3750, 1.0);
    let mut group = c.benchmark_group("generate_256_samples");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| generate(&spec, 0, 0, 256, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, batch_inference, data_generation);
criterion_main!(benches);
