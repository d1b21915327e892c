//! Prototype-based distance VAE for out-of-distribution detection.
//!
//! A convolutional VAE encodes images into a latent space where each class
//! is represented by `J` prototypes. Class logits follow a generalized
//! Gaussian of the distance to the nearest prototype of each class, so
//! embeddings are pulled into a bounded region around the prototypes. At
//! test time a distance-based score and a reconstruction error are
//! normalized on validation data and fused into a single OOD score.

pub mod config;
pub mod datasets;
pub mod error;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod ood;
pub mod perceptual;
pub mod real;
pub mod tensor_io;
pub mod trainer;

pub use datasets::{Dataset, DatasetManifest, ImageBatch, ImageShape, ManifestEntry, Split};
pub use error::{Error, Result};
pub use model::{init_model, DistanceTable, HeadKind, LatentDistribution, Model, ModelConfig, Prediction};
pub use objectives::{LossBreakdown, LossWeights};
pub use ood::{EvalReport, FusionConfig, FusionNorm, ScoreKind, ScoreNormalizer, ScorePipeline, ScoreRecord};
pub use perceptual::{MetricKind, PerceptualExtractor, ReconstructionMetric};
pub use real::Real;
pub use trainer::{fit, load_checkpoint, save_checkpoint, train_step, Checkpoint, TrainConfig};
pub use config::{DataConfig, ExperimentConfig};
