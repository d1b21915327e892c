use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion, Throughput};
use ndarray::Array4;
use protodist::nn::{Conv2d, ParamGroup, ParamStore};
use protodist::ood::auroc;
use protodist::trainer::{Optimizer, OptimizerKind};
use protodist::{train_step, ImageShape, Model, ReconstructionMetric, TrainConfig};
use protodist_bench::{mnist_like_batch, random_images, small_model, tied_scores};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::<f32>::new();
    let layer = Conv2d::new(&mut store, "c", ParamGroup::Encoder, 16, 32, 3, 2, 1, 1.0, &mut rng);
    let x = random_images(64, ImageShape::new(16, 28, 28), 1);
    let mut group = c.benchmark_group("conv3x3_16to32_s2");
    group.throughput(Throughput::Elements(64));
    group.bench_function("forward", |b| b.iter(|| black_box(layer.forward(&store, x.view()))));
    let (y, cache) = layer.forward(&store, x.view());
    let dy = Array4::<f32>::ones(y.dim());
    group.bench_function("backward", |b| {
        b.iter(|| {
            let mut grads = store.zero_grads();
            black_box(layer.backward(&store, &cache, dy.view(), Some(&mut grads), true))
        })
    });
    group.finish();
}

fn step(c: &mut Criterion) {
    let batch = mnist_like_batch(32, 2);
    let mut group = c.benchmark_group("train_step_batch32");
    group.throughput(Throughput::Elements(32));
    group.sample_size(10);
    for kind in [protodist::MetricKind::Mse, protodist::MetricKind::Perceptual] {
        let cfg = TrainConfig {
            rec_metric: kind,
            ..TrainConfig::default()
        };
        let metric = ReconstructionMetric::from_kind(kind, &cfg.extractor().unwrap());
        let model = Model::<f32>::new(small_model()).unwrap();
        group.bench_function(format!("{kind:?}").to_lowercase(), |b| {
            b.iter_batched(
                || {
                    let opt = Optimizer::new(OptimizerKind::Adam, cfg.learning_rate, &model.params);
                    (model.clone(), opt, ChaCha8Rng::seed_from_u64(3))
                },
                |(mut m, mut opt, mut rng)| black_box(train_step(&mut m, &mut opt, &batch, &cfg, &metric, &mut rng, 0)),
                BatchSize::LargeInput,
            )
        });
    }
    group.finish();
}

fn rank_auroc(c: &mut Criterion) {
    let mut group = c.benchmark_group("auroc");
    for n in [1_000, 10_000, 100_000] {
        let id = tied_scores(n, 0.0, 4);
        let ood = tied_scores(n, 0.2, 5);
        group.throughput(Throughput::Elements(2 * n as u64));
        group.bench_function(n.to_string(), |b| b.iter(|| black_box(auroc(&id, &ood))));
    }
    group.finish();
}

criterion_group!(benches, conv, step, rank_auroc);
criterion_main!(benches);
