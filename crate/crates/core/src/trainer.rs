//! Training loop, optimizers and checkpoint persistence.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use ndarray::{Array2, ArrayD, Zip};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::datasets::{make_batches, Dataset, ImageBatch, Split};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::nn::{Grads, ParamGroup, ParamStore};
use crate::objectives::{objective_value, objective_with_grads, LossBreakdown, LossWeights, ObjectiveOptions};
use crate::ood::{compute_scores, labels_of, ScorePipeline, DEFAULT_PERCENTILES};
use crate::perceptual::{MetricKind, PerceptualExtractor, ReconstructionMetric};
use crate::tensor_io;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub weights: LossWeights,
    pub rec_metric: MetricKind,
    pub seed: u64,
    pub checkpoint_dir: Option<PathBuf>,
    /// Validation loss and accuracy are computed every this many epochs.
    pub eval_every: usize,
    /// Rescale gradients whose global L2 norm exceeds this value.
    pub grad_clip: Option<f64>,
    /// Keep the reconstruction term in the loss report but do not train on it.
    pub freeze_reconstruction: bool,
    pub percentiles: (f64, f64),
    /// Tensor container with perceptual extractor weights; the built-in
    /// random-feature extractor is used when absent.
    pub perceptual_weights: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 128,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            weights: LossWeights::default(),
            rec_metric: MetricKind::Perceptual,
            seed: 0,
            checkpoint_dir: None,
            eval_every: 1,
            grad_clip: None,
            freeze_reconstruction: false,
            percentiles: DEFAULT_PERCENTILES,
            perceptual_weights: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("train.epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("train.learning_rate", "must be a finite value > 0"));
        }
        if self.eval_every == 0 {
            return Err(Error::config("train.eval_every", "must be at least 1"));
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::config("train.grad_clip", "must be > 0 when set"));
        }
        let (lo, hi) = self.percentiles;
        if !(0.0 <= lo && lo < hi && hi <= 100.0) {
            return Err(Error::config("train.percentiles", "need 0 ≤ lo < hi ≤ 100"));
        }
        self.weights.validate()
    }

    pub fn extractor(&self) -> Result<Arc<PerceptualExtractor<f32>>> {
        Ok(Arc::new(match &self.perceptual_weights {
            Some(dir) => PerceptualExtractor::load(dir)?,
            None => PerceptualExtractor::default_random(),
        }))
    }
}

/// First-order optimizer over the trainable parameters of a model.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of updates applied so far.
    pub t: u64,
    pub m: Vec<ArrayD<f32>>,
    pub v: Vec<ArrayD<f32>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64, params: &ParamStore<f32>) -> Self {
        let zeros = || match kind {
            OptimizerKind::Adam => params.entries().iter().map(|e| ArrayD::zeros(e.value.raw_dim())).collect(),
            OptimizerKind::Sgd => Vec::new(),
        };
        Self {
            kind,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore<f32>, grads: &Grads<f32>) {
        self.t += 1;
        let lr = self.learning_rate as f32;
        match self.kind {
            OptimizerKind::Sgd => {
                for (e, g) in params.entries_mut().iter_mut().zip(&grads.tensors) {
                    if e.group != ParamGroup::Extractor {
                        e.value.scaled_add(-lr, g);
                    }
                }
            }
            OptimizerKind::Adam => {
                let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
                let c1 = (1.0 - self.beta1.powf(self.t as f64)) as f32;
                let c2 = (1.0 - self.beta2.powf(self.t as f64)) as f32;
                let eps = self.eps as f32;
                for (((e, g), m), v) in params
                    .entries_mut()
                    .iter_mut()
                    .zip(&grads.tensors)
                    .zip(&mut self.m)
                    .zip(&mut self.v)
                {
                    if e.group == ParamGroup::Extractor {
                        continue;
                    }
                    Zip::from(&mut e.value).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                        *m = b1 * *m + (1.0 - b1) * g;
                        *v = b2 * *v + (1.0 - b2) * g * g;
                        *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                    });
                }
            }
        }
    }
}

/// One optimizer update on a labelled batch with a freshly sampled latent.
pub fn train_step(
    model: &mut Model<f32>,
    optimizer: &mut Optimizer,
    batch: &ImageBatch,
    config: &TrainConfig,
    metric: &ReconstructionMetric<f32>,
    rng: &mut ChaCha8Rng,
    step: u64,
) -> Result<LossBreakdown> {
    let labels = batch
        .labels
        .as_deref()
        .ok_or_else(|| Error::Consistency("training batch has no labels".into()))?;
    let eps = Array2::from_shape_simple_fn((batch.len(), model.config.latent_dim), || {
        rng.sample::<f32, _>(StandardNormal)
    });
    let options = ObjectiveOptions {
        weights: config.weights,
        freeze_reconstruction: config.freeze_reconstruction,
    };
    let (loss, mut grads) = objective_with_grads(model, batch.data.view(), labels, eps.view(), metric, &options)?;
    if !loss.is_finite() || !grads.all_finite() {
        return Err(Error::NonFinite {
            step,
            breakdown: loss.to_string(),
        });
    }
    if let Some(clip) = config.grad_clip {
        let norm = grads.global_norm() as f64;
        if norm > clip {
            grads.scale((clip / norm) as f32);
        }
    }
    optimizer.step(&mut model.params, &grads);
    Ok(loss)
}

/// Mean-latent loss and accuracy over a split; touches neither parameters nor rng.
pub fn evaluate_split(
    model: &Model<f32>,
    data: &Dataset,
    split: Split,
    config: &TrainConfig,
    metric: &ReconstructionMetric<f32>,
) -> Result<(LossBreakdown, f64)> {
    let options = ObjectiveOptions {
        weights: config.weights,
        freeze_reconstruction: false,
    };
    let mut sum = LossBreakdown::default();
    let (mut n, mut correct) = (0usize, 0usize);
    for batch in make_batches(data, split, config.batch_size, None)? {
        let labels = batch.labels.as_deref().unwrap_or_default();
        let zero = Array2::zeros((batch.len(), model.config.latent_dim));
        let loss = objective_value(model, batch.data.view(), labels, zero.view(), metric, &options)?;
        let pred = model.predict(batch.data.view())?;
        correct += pred.classes.iter().zip(labels).filter(|(p, y)| p == y).count();
        let w = batch.len() as f64;
        sum.cls += loss.cls * w;
        sum.kl += loss.kl * w;
        sum.rec += loss.rec * w;
        sum.orth += loss.orth * w;
        sum.total += loss.total * w;
        n += batch.len();
    }
    if n == 0 {
        return Err(Error::Consistency(format!("split `{split}` is empty")));
    }
    let n = n as f64;
    Ok((
        LossBreakdown {
            cls: sum.cls / n,
            kl: sum.kl / n,
            rec: sum.rec / n,
            orth: sum.orth / n,
            total: sum.total / n,
        },
        correct as f64 / n,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train: LossBreakdown,
    pub val: Option<LossBreakdown>,
    pub val_accuracy: Option<f64>,
    pub seconds: f64,
}

/// Everything needed to resume training or run inference.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub train_config: TrainConfig,
    pub optimizer: Optimizer,
    /// Completed epochs.
    pub epoch: usize,
    pub step: u64,
    pub rng: ChaCha8Rng,
    pub pipeline: ScorePipeline,
    /// Manifest fingerprints keyed by role, e.g. `data`.
    pub fingerprints: BTreeMap<String, String>,
    pub history: Vec<EpochLog>,
}

impl Checkpoint {
    pub fn new(model: Model<f32>, train_config: TrainConfig) -> Self {
        let optimizer = Optimizer::new(train_config.optimizer, train_config.learning_rate, &model.params);
        let rng = ChaCha8Rng::seed_from_u64(train_config.seed);
        Self {
            model,
            train_config,
            optimizer,
            epoch: 0,
            step: 0,
            rng,
            pipeline: ScorePipeline::default(),
            fingerprints: BTreeMap::new(),
            history: Vec::new(),
        }
    }
}

/// Trains on the `train` split, then fits score normalizers on `val`.
///
/// With `resume`, training continues from the stored epoch, parameters,
/// optimizer moments and rng state up to `config.epochs`.
pub fn fit(
    data: &Dataset,
    model_config: &ModelConfig,
    config: &TrainConfig,
    resume: Option<Checkpoint>,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<Checkpoint> {
    config.validate()?;
    model_config.validate()?;
    for split in [Split::Train, Split::Val] {
        if data.manifest.split_indices(split).is_empty() {
            return Err(Error::Consistency(format!("`{split}` split is empty")));
        }
    }
    let fingerprint = data.manifest.fingerprint();
    let mut ckpt = match resume {
        Some(mut c) => {
            if c.model.config != *model_config {
                return Err(Error::State("checkpoint model config differs from the requested one".into()));
            }
            if c.fingerprints.get("data").is_some_and(|f| *f != fingerprint) {
                log::warn!("resuming on data whose manifest fingerprint differs from the checkpoint");
            }
            c.optimizer.learning_rate = config.learning_rate;
            c.train_config = config.clone();
            c
        }
        None => Checkpoint::new(Model::new(model_config.clone())?, config.clone()),
    };
    ckpt.fingerprints.insert("data".into(), fingerprint);

    let extractor = config.extractor()?;
    let metric = ReconstructionMetric::from_kind(config.rec_metric, &extractor);
    while ckpt.epoch < config.epochs {
        let started = Instant::now();
        let shuffle = ckpt.rng.next_u64();
        let mut sum = LossBreakdown::default();
        let mut n = 0usize;
        for batch in make_batches(data, Split::Train, config.batch_size, Some(shuffle))? {
            let loss = train_step(
                &mut ckpt.model,
                &mut ckpt.optimizer,
                &batch,
                config,
                &metric,
                &mut ckpt.rng,
                ckpt.step,
            )?;
            ckpt.step += 1;
            let w = batch.len() as f64;
            sum.cls += loss.cls * w;
            sum.kl += loss.kl * w;
            sum.rec += loss.rec * w;
            sum.orth += loss.orth * w;
            sum.total += loss.total * w;
            n += batch.len();
        }
        let n = n as f64;
        let train = LossBreakdown {
            cls: sum.cls / n,
            kl: sum.kl / n,
            rec: sum.rec / n,
            orth: sum.orth / n,
            total: sum.total / n,
        };
        ckpt.epoch += 1;
        let (val, val_accuracy) = if ckpt.epoch % config.eval_every == 0 || ckpt.epoch == config.epochs {
            let (l, a) = evaluate_split(&ckpt.model, data, Split::Val, config, &metric)?;
            (Some(l), Some(a))
        } else {
            (None, None)
        };
        let log = EpochLog {
            epoch: ckpt.epoch,
            train,
            val,
            val_accuracy,
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!("epoch {} {}", log.epoch, log.train);
        on_epoch(&log);
        ckpt.history.push(log);
        if let Some(dir) = &config.checkpoint_dir {
            save_checkpoint(&ckpt, dir)?;
        }
    }

    let val = data.split(Split::Val, None);
    let raw = compute_scores(&ckpt.model, val.pixels().view(), &extractor, config.batch_size)?;
    ckpt.pipeline = ScorePipeline::fit(&raw, config.percentiles)?;
    if let Some(dir) = &config.checkpoint_dir {
        save_checkpoint(&ckpt, dir)?;
    }
    Ok(ckpt)
}

/// Accuracy of `predict` on a labelled dataset.
pub fn accuracy(model: &Model<f32>, data: &Dataset, batch_size: usize) -> Result<f64> {
    let labels = labels_of(data);
    if labels.is_empty() {
        return Err(Error::Evaluation("accuracy on an empty dataset".into()));
    }
    let mut correct = 0;
    let x = data.pixels();
    for (start, chunk) in labels.chunks(batch_size.max(1)).enumerate().map(|(i, c)| (i * batch_size.max(1), c)) {
        let view = x.slice(ndarray::s![start..start + chunk.len(), .., .., ..]);
        let pred = model.predict(view)?;
        correct += pred.classes.iter().zip(chunk).filter(|(p, y)| p == y).count();
    }
    Ok(correct as f64 / labels.len() as f64)
}

const PARAM_PREFIX: &str = "param/";
const ADAM_M_PREFIX: &str = "adam.m/";
const ADAM_V_PREFIX: &str = "adam.v/";

#[derive(Serialize, Deserialize)]
struct RngState {
    seed: String,
    stream: u64,
    word_pos: String,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Option<[u8; 32]> {
    if s.len() != 64 {
        return None;
    }
    let mut out = [0u8; 32];
    for (i, o) in out.iter_mut().enumerate() {
        *o = u8::from_str_radix(s.get(2 * i..2 * i + 2)?, 16).ok()?;
    }
    Some(out)
}

#[derive(Serialize, Deserialize)]
struct OptimizerState {
    kind: OptimizerKind,
    learning_rate: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("checkpoint metadata serializes")
}

pub fn save_checkpoint(ckpt: &Checkpoint, dir: &Path) -> Result<()> {
    let mut attrs = Map::new();
    attrs.insert("kind".into(), Value::from("protodist-checkpoint"));
    attrs.insert("model_config".into(), to_value(&ckpt.model.config));
    attrs.insert("train_config".into(), to_value(&ckpt.train_config));
    attrs.insert("epoch".into(), Value::from(ckpt.epoch));
    attrs.insert("step".into(), Value::from(ckpt.step));
    attrs.insert(
        "rng".into(),
        to_value(&RngState {
            seed: hex(&ckpt.rng.get_seed()),
            stream: ckpt.rng.get_stream(),
            word_pos: ckpt.rng.get_word_pos().to_string(),
        }),
    );
    let o = &ckpt.optimizer;
    attrs.insert(
        "optimizer".into(),
        to_value(&OptimizerState {
            kind: o.kind,
            learning_rate: o.learning_rate,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
            t: o.t,
        }),
    );
    attrs.insert("pipeline".into(), to_value(&ckpt.pipeline));
    attrs.insert("fingerprints".into(), to_value(&ckpt.fingerprints));
    attrs.insert("history".into(), to_value(&ckpt.history));

    let entries = ckpt.model.params.entries();
    let mut tensors: Vec<(String, ArrayD<f32>)> = entries
        .iter()
        .map(|e| (format!("{PARAM_PREFIX}{}", e.name), e.value.clone()))
        .collect();
    for (prefix, moments) in [(ADAM_M_PREFIX, &o.m), (ADAM_V_PREFIX, &o.v)] {
        for (e, t) in entries.iter().zip(moments) {
            tensors.push((format!("{prefix}{}", e.name), t.clone()));
        }
    }
    tensor_io::write_container(dir, &attrs, &tensors)
}

fn attr<T: serde::de::DeserializeOwned>(dir: &Path, attrs: &Map<String, Value>, key: &str) -> Result<T> {
    let v = attrs
        .get(key)
        .cloned()
        .ok_or_else(|| Error::format(dir, format!("checkpoint metadata lacks `{key}`")))?;
    serde_json::from_value(v).map_err(|e| Error::format(dir, format!("bad `{key}`: {e}")))
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let c = tensor_io::read_container(dir)?;
    let a = &c.attributes;
    let model_config: ModelConfig = attr(dir, a, "model_config")?;
    let train_config: TrainConfig = attr(dir, a, "train_config")?;
    let mut model = Model::<f32>::new(model_config)?;
    for e in model.params.entries_mut() {
        let name = format!("{PARAM_PREFIX}{}", e.name);
        let t = c.tensor(&name)?;
        if t.shape() != e.value.shape() {
            return Err(Error::Tensor {
                name,
                reason: format!("expected shape {:?}, found {:?}", e.value.shape(), t.shape()),
            });
        }
        e.value = t.clone();
    }
    let o: OptimizerState = attr(dir, a, "optimizer")?;
    let moments = |prefix: &str| -> Result<Vec<ArrayD<f32>>> {
        if o.kind != OptimizerKind::Adam {
            return Ok(Vec::new());
        }
        model
            .params
            .entries()
            .iter()
            .map(|e| c.tensor(&format!("{prefix}{}", e.name)).cloned())
            .collect()
    };
    let optimizer = Optimizer {
        kind: o.kind,
        learning_rate: o.learning_rate,
        beta1: o.beta1,
        beta2: o.beta2,
        eps: o.eps,
        t: o.t,
        m: moments(ADAM_M_PREFIX)?,
        v: moments(ADAM_V_PREFIX)?,
    };
    let r: RngState = attr(dir, a, "rng")?;
    let seed = unhex(&r.seed).ok_or_else(|| Error::format(dir, "bad rng seed"))?;
    let word_pos: u128 = r.word_pos.parse().map_err(|_| Error::format(dir, "bad rng word position"))?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(r.stream);
    rng.set_word_pos(word_pos);
    Ok(Checkpoint {
        model,
        train_config,
        optimizer,
        epoch: attr(dir, a, "epoch")?,
        step: attr(dir, a, "step")?,
        rng,
        pipeline: attr(dir, a, "pipeline")?,
        fingerprints: attr(dir, a, "fingerprints")?,
        history: attr(dir, a, "history")?,
    })
}
