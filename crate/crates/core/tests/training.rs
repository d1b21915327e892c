#[path = "support/toy.rs"]
mod toy;

use std::fs;

use protodist::datasets::make_batches;
use protodist::trainer::{Optimizer, OptimizerKind};
use protodist::{
    fit, load_checkpoint, save_checkpoint, train_step, Checkpoint, Error, MetricKind, Model, ReconstructionMetric, Split,
    TrainConfig,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

fn params_of(model: &Model<f32>) -> Vec<Vec<u32>> {
    model
        .params
        .entries()
        .iter()
        .map(|e| e.value.iter().map(|v| v.to_bits()).collect())
        .collect()
}

fn eight_sample_batch() -> protodist::ImageBatch {
    let data = toy::train_val(8, 0, 5);
    make_batches(&data, Split::Train, 8, None).unwrap().next().unwrap()
}

fn run_steps(steps: usize, lr: f64, metric: MetricKind) -> (Vec<f64>, Model<f32>) {
    let mut model = Model::<f32>::new(toy::model_config(3)).unwrap();
    let cfg = TrainConfig {
        learning_rate: lr,
        rec_metric: metric,
        ..TrainConfig::default()
    };
    let mut opt = Optimizer::new(OptimizerKind::Adam, lr, &model.params);
    let metric = ReconstructionMetric::from_kind(cfg.rec_metric, &cfg.extractor().unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let batch = eight_sample_batch();
    let losses = (0..steps)
        .map(|s| {
            train_step(&mut model, &mut opt, &batch, &cfg, &metric, &mut rng, s as u64)
                .unwrap()
                .total
        })
        .collect();
    (losses, model)
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let before = params_of(&Model::<f32>::new(toy::model_config(3)).unwrap());
    for kind in [OptimizerKind::Adam, OptimizerKind::Sgd] {
        let mut model = Model::<f32>::new(toy::model_config(3)).unwrap();
        let mut opt = Optimizer::new(kind, 0.0, &model.params);
        let cfg = TrainConfig::default();
        let metric = ReconstructionMetric::from_kind(cfg.rec_metric, &cfg.extractor().unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch = eight_sample_batch();
        for s in 0..3 {
            train_step(&mut model, &mut opt, &batch, &cfg, &metric, &mut rng, s).unwrap();
        }
        assert_eq!(params_of(&model), before, "{kind:?}");
    }
}

#[test]
fn three_steps_are_bitwise_reproducible() {
    let (a, ma) = run_steps(3, 1e-3, MetricKind::Perceptual);
    let (b, mb) = run_steps(3, 1e-3, MetricKind::Perceptual);
    assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert_eq!(params_of(&ma), params_of(&mb));
}

#[test]
fn eight_samples_are_overfit_within_200_steps() {
    for metric in [MetricKind::Mse, MetricKind::Perceptual] {
        let (losses, _) = run_steps(200, 5e-3, metric);
        let (first, last) = (losses[0], *losses.last().unwrap());
        assert!(last <= 0.5 * first, "{metric:?}: {first} -> {last}");
    }
}

fn small_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 16,
        learning_rate: 3e-3,
        seed: 4,
        ..TrainConfig::default()
    }
}

#[test]
fn one_epoch_fit_returns_fitted_normalizers() {
    let data = toy::train_val(64, 24, 1);
    let mut logs = Vec::new();
    let ckpt = fit(&data, &toy::model_config(0), &small_config(1), None, &mut |l| logs.push(l.epoch)).unwrap();
    assert_eq!(logs, [1]);
    assert_eq!(ckpt.epoch, 1);
    assert_eq!(ckpt.step, 4);
    assert!(ckpt.pipeline.is_fitted());
    for kind in protodist::ScoreKind::ALL {
        let n = ckpt.pipeline.normalizer(kind).unwrap();
        assert!(n.upper > n.lower, "{kind}");
    }
    assert!(ckpt.history[0].val_accuracy.is_some());
}

#[test]
fn resumed_fit_matches_an_uninterrupted_run() {
    let data = toy::train_val(64, 24, 1);
    let dir = TempDir::new().unwrap();
    let mut first = small_config(1);
    first.checkpoint_dir = Some(dir.path().join("ckpt"));
    fit(&data, &toy::model_config(0), &first, None, &mut |_| {}).unwrap();

    let resumed = load_checkpoint(&dir.path().join("ckpt")).unwrap();
    assert_eq!(resumed.epoch, 1);
    let mut epochs = Vec::new();
    let cont = fit(&data, &toy::model_config(0), &small_config(2), Some(resumed), &mut |l| epochs.push(l.epoch)).unwrap();
    assert_eq!(epochs, [2]);
    assert_eq!(cont.epoch, 2);
    assert_eq!(cont.history.len(), 2);

    let straight = fit(&data, &toy::model_config(0), &small_config(2), None, &mut |_| {}).unwrap();
    assert_eq!(params_of(&cont.model), params_of(&straight.model));
    assert_eq!(cont.step, straight.step);
}

#[test]
fn resume_rejects_a_different_model() {
    let data = toy::train_val(32, 24, 1);
    let ckpt = fit(&data, &toy::model_config(0), &small_config(1), None, &mut |_| {}).unwrap();
    let mut other = toy::model_config(0);
    other.latent_dim = 5;
    assert!(matches!(fit(&data, &other, &small_config(2), Some(ckpt), &mut |_| {}), Err(Error::State(_))));
}

fn trained_checkpoint() -> Checkpoint {
    let data = toy::train_val(48, 24, 2);
    fit(&data, &toy::model_config(1), &small_config(1), None, &mut |_| {}).unwrap()
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let ckpt = trained_checkpoint();
    let dir = TempDir::new().unwrap();
    save_checkpoint(&ckpt, dir.path()).unwrap();
    let back = load_checkpoint(dir.path()).unwrap();

    assert_eq!(params_of(&back.model), params_of(&ckpt.model));
    for (a, b) in ckpt.optimizer.m.iter().chain(&ckpt.optimizer.v).zip(back.optimizer.m.iter().chain(&back.optimizer.v)) {
        assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }
    assert_eq!(back.optimizer.t, ckpt.optimizer.t);
    assert_eq!((back.epoch, back.step), (ckpt.epoch, ckpt.step));
    assert_eq!(back.pipeline, ckpt.pipeline);
    assert_eq!(back.history, ckpt.history);
    assert_eq!(back.train_config, ckpt.train_config);
    assert_eq!(back.rng, ckpt.rng);

    let (probe, _) = toy::images(10, 77);
    let p0 = ckpt.model.predict(probe.view()).unwrap();
    let p1 = back.model.predict(probe.view()).unwrap();
    assert_eq!(p0.classes, p1.classes);
    assert_eq!(p0.probs, p1.probs);
    assert_eq!(p0.latent, p1.latent);
    assert_eq!(ckpt.model.reconstruct(probe.view()).unwrap(), back.model.reconstruct(probe.view()).unwrap());

    // Saving the loaded checkpoint reproduces the same files.
    let again = TempDir::new().unwrap();
    save_checkpoint(&back, again.path()).unwrap();
    let mut names: Vec<_> = fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    for name in names {
        assert_eq!(
            fs::read(dir.path().join(&name)).unwrap(),
            fs::read(again.path().join(&name)).unwrap(),
            "{name:?}"
        );
    }
}

#[test]
fn truncated_parameter_file_names_the_tensor() {
    let ckpt = trained_checkpoint();
    let dir = TempDir::new().unwrap();
    save_checkpoint(&ckpt, dir.path()).unwrap();
    let meta: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("meta.json")).unwrap()).unwrap();
    let entry = meta["tensors"]
        .as_array()
        .unwrap()
        .iter()
        .find(|t| t["name"].as_str().unwrap().starts_with("param/"))
        .unwrap();
    let file = dir.path().join(entry["file"].as_str().unwrap());
    let bytes = fs::read(&file).unwrap();
    fs::write(&file, &bytes[..bytes.len() - 3]).unwrap();
    match load_checkpoint(dir.path()) {
        Err(Error::Tensor { name, .. }) => assert_eq!(name, entry["name"].as_str().unwrap()),
        other => panic!("expected tensor error, got {other:?}"),
    }
}
