//! Small synthetic two-class image sets for trainer and scoring tests.

use ndarray::Array4;
use protodist::datasets::SampleSource;
use protodist::{Dataset, DatasetManifest, ImageShape, ManifestEntry, ModelConfig, Split};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const SIDE: usize = 8;

/// K=2, J=1, L=4 on 8×8 single-channel images.
#[allow(dead_code)]
pub fn model_config(seed: u64) -> ModelConfig {
    ModelConfig {
        num_classes: 2,
        protos_per_class: 1,
        latent_dim: 4,
        image_shape: ImageShape::new(1, SIDE, SIDE),
        encoder_widths: vec![4, 8, 8, 8, 8],
        decoder_widths: vec![8, 4, 4, 4, 4],
        seed,
        ..ModelConfig::default()
    }
}

/// Class 0 lights an upper-left square, class 1 a lower-right one.
pub fn images(n: usize, seed: u64) -> (Array4<f32>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Array4::zeros((n, 1, SIDE, SIDE));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 2;
        let o = if label == 0 { 1 } else { 4 };
        for r in 0..SIDE {
            for c in 0..SIDE {
                let on = (o..o + 3).contains(&r) && (o..o + 3).contains(&c);
                let base = if on { 0.8 } else { 0.0 };
                x[[i, 0, r, c]] = base + rng.random::<f32>() * 0.15;
            }
        }
        labels.push(label);
    }
    (x, labels)
}

/// Uniform noise images.
#[allow(dead_code)]
pub fn noise(n: usize, seed: u64) -> Array4<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array4::from_shape_simple_fn((n, 1, SIDE, SIDE), || rng.random::<f32>())
}

/// Wraps pixels as a dataset with the given split tags.
pub fn dataset(x: Array4<f32>, labels: &[usize], splits: &[Split]) -> Dataset {
    let entries = labels
        .iter()
        .zip(splits)
        .enumerate()
        .map(|(i, (&label, &split))| ManifestEntry {
            source: SampleSource::Offset(i),
            label,
            split,
        })
        .collect();
    let manifest = DatasetManifest {
        entries,
        class_names: vec!["a".into(), "b".into()],
        image_shape: ImageShape::new(1, SIDE, SIDE),
    };
    Dataset::new(manifest, x).unwrap()
}

/// `n_train` train samples followed by `n_val` validation samples.
#[allow(dead_code)]
pub fn train_val(n_train: usize, n_val: usize, seed: u64) -> Dataset {
    let (x, labels) = images(n_train + n_val, seed);
    let splits: Vec<Split> = (0..n_train + n_val)
        .map(|i| if i < n_train { Split::Train } else { Split::Val })
        .collect();
    dataset(x, &labels, &splits)
}
