//! Shared inputs for the criterion benches.

use ndarray::Array4;
use protodist::datasets::{make_batches, SampleSource};
use protodist::{Dataset, DatasetManifest, ImageBatch, ImageShape, ManifestEntry, ModelConfig, Split};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// The small MNIST-sized model used for desk-scale runs.
pub fn small_model() -> ModelConfig {
    ModelConfig {
        encoder_widths: vec![16, 32, 64, 64, 64],
        decoder_widths: vec![32, 16, 16, 8, 8],
        ..ModelConfig::default()
    }
}

pub fn random_images(n: usize, shape: ImageShape, seed: u64) -> Array4<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array4::from_shape_simple_fn((n, shape.channels, shape.height, shape.width), || rng.random())
}

/// One labelled batch of random 28×28 images over ten classes.
pub fn mnist_like_batch(n: usize, seed: u64) -> ImageBatch {
    let shape = ImageShape::new(1, 28, 28);
    let manifest = DatasetManifest {
        entries: (0..n)
            .map(|i| ManifestEntry {
                source: SampleSource::Offset(i),
                label: i % 10,
                split: Split::Train,
            })
            .collect(),
        class_names: (0..10).map(|k| k.to_string()).collect(),
        image_shape: shape,
    };
    let data = Dataset::new(manifest, random_images(n, shape, seed)).expect("consistent");
    make_batches(&data, Split::Train, n, None).expect("positive batch").next().expect("non-empty")
}

/// Scores with ties: values on a coarse grid, OOD shifted upwards.
pub fn tied_scores(n: usize, shift: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| (rng.random::<f64>() * 50.0).floor() / 50.0 + shift).collect()
}
