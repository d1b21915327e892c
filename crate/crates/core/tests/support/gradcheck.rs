//! Central finite-difference check of the training objective in f64.

use std::collections::BTreeMap;

use ndarray::{Array2, Array4};
use protodist::model::{Model, ModelConfig};
use protodist::nn::ParamGroup;
use protodist::objectives::{objective_value, objective_with_grads, LossWeights, ObjectiveOptions};
use protodist::perceptual::ReconstructionMetric;
use protodist::ImageShape;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const STEP: f64 = 1e-5;
/// Denominator floor for the relative error. Central differences in f64 at
/// this step carry about 1e-11 of absolute noise, so entries far below 1e-6
/// cannot be compared relatively.
pub const DENOM_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Term {
    Cls,
    Kl,
    RecMse,
    RecPerceptual,
    Orth,
}

impl Term {
    pub const ALL: [Term; 5] = [Term::Cls, Term::Kl, Term::RecMse, Term::RecPerceptual, Term::Orth];

    fn weights(self) -> LossWeights {
        let zero = LossWeights {
            cls: 0.0,
            kl: 0.0,
            rec: 0.0,
            orth: 0.0,
        };
        match self {
            Term::Cls => LossWeights { cls: 1.0, ..zero },
            Term::Kl => LossWeights { kl: 1.0, ..zero },
            Term::RecMse | Term::RecPerceptual => LossWeights { rec: 1.0, ..zero },
            Term::Orth => LossWeights { orth: 1.0, ..zero },
        }
    }

    fn metric(self) -> ReconstructionMetric<f64> {
        match self {
            Term::RecPerceptual => ReconstructionMetric::perceptual_default(),
            _ => ReconstructionMetric::Mse,
        }
    }
}

/// K=2, J=2, L=4 on 8×8 single-channel images.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        num_classes: 2,
        protos_per_class: 2,
        latent_dim: 4,
        image_shape: ImageShape::new(1, 8, 8),
        encoder_widths: vec![3, 4, 4, 4, 4],
        decoder_widths: vec![3, 3, 2, 2, 2],
        seed: 11,
        ..ModelConfig::default()
    }
}

pub struct Fixture {
    pub model: Model<f64>,
    pub x: Array4<f64>,
    pub labels: Vec<usize>,
    pub eps: Array2<f64>,
}

pub fn fixture() -> Fixture {
    fixture_with(tiny_config())
}

pub fn fixture_with(config: ModelConfig) -> Fixture {
    let model = Model::<f64>::new(config).expect("valid config");
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let x = Array4::from_shape_simple_fn((2, 1, 8, 8), || rng.random_range(0.0..1.0));
    let eps = Array2::from_shape_simple_fn((2, 4), || rng.sample(StandardNormal));
    Fixture {
        model,
        x,
        labels: vec![0, 1],
        eps,
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GroupResult {
    pub max_rel: f64,
    pub checked: usize,
    pub max_abs_grad: f64,
    pub max_abs_diff: f64,
}

/// Worst relative error per parameter group for one loss term.
#[allow(dead_code)]
pub fn check_term(fx: &Fixture, term: Term) -> BTreeMap<ParamGroup, GroupResult> {
    let metric = term.metric();
    let options = ObjectiveOptions {
        weights: term.weights(),
        freeze_reconstruction: false,
    };
    let (_, grads) =
        objective_with_grads(&fx.model, fx.x.view(), &fx.labels, fx.eps.view(), &metric, &options).expect("objective");
    let mut model = fx.model.clone();
    let mut out: BTreeMap<ParamGroup, GroupResult> = BTreeMap::new();
    for idx in 0..model.params.len() {
        let group = model.params.entries()[idx].group;
        let numel = model.params.entries()[idx].value.len();
        for flat in 0..numel {
            let orig = model.params.entries()[idx].value.as_slice().expect("contiguous")[flat];
            let eval = |v: f64, model: &mut Model<f64>| {
                model.params.entries_mut()[idx].value.as_slice_mut().expect("contiguous")[flat] = v;
                objective_value(model, fx.x.view(), &fx.labels, fx.eps.view(), &metric, &options)
                    .expect("objective")
                    .total
            };
            let plus = eval(orig + STEP, &mut model);
            let minus = eval(orig - STEP, &mut model);
            eval(orig, &mut model);
            let numeric = (plus - minus) / (2.0 * STEP);
            let analytic = grads.tensors[idx].as_slice().expect("contiguous")[flat];
            let diff = (analytic - numeric).abs();
            let rel = diff / analytic.abs().max(numeric.abs()).max(DENOM_FLOOR);
            let e = out.entry(group).or_insert(GroupResult {
                max_rel: 0.0,
                checked: 0,
                max_abs_grad: 0.0,
                max_abs_diff: 0.0,
            });
            e.max_abs_diff = e.max_abs_diff.max(diff);
            e.max_rel = e.max_rel.max(rel);
            e.checked += 1;
            e.max_abs_grad = e.max_abs_grad.max(analytic.abs());
        }
    }
    out
}
