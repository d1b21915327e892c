//! The prototype-distance VAE: convolutional encoder, sub-pixel decoder,
//! prototype bank and the distance-based classification head.

use ndarray::{s, Array2, Array3, Array4, ArrayView2, ArrayView3, ArrayView4, Axis, Ix3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::datasets::ImageShape;
use crate::error::{Error, Result};
use crate::nn::{ops, Conv2d, ConvCache, Dense, Grads, ParamGroup, ParamId, ParamStore};
use crate::real::Real;

/// Smoothing constant of the similarity head, `log((d²+1)/(d²+ε))`.
pub const SIMILARITY_EPS: f64 = 1e-4;

/// How prototype distances become class logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// `l = −(d/α)^β`: flat near the prototype, steep further out.
    #[default]
    GeneralizedGaussian,
    /// `l = log((d²+1)/(d²+ε))`, steepest near the prototype. Used only for ablations.
    Similarity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub protos_per_class: usize,
    pub latent_dim: usize,
    pub alpha: f64,
    pub beta: f64,
    pub image_shape: ImageShape,
    /// Channels of the five stride-2 encoder convolutions.
    pub encoder_widths: Vec<usize>,
    /// Channels of the decoder: the dense seed map, two sub-pixel stages and
    /// two refinement convolutions.
    pub decoder_widths: Vec<usize>,
    pub head: HeadKind,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_classes: 10,
            protos_per_class: 1,
            latent_dim: 32,
            alpha: 2.0,
            beta: 2.0,
            image_shape: ImageShape::new(1, 28, 28),
            encoder_widths: vec![32, 64, 128, 256, 256],
            decoder_widths: vec![64, 32, 32, 16, 16],
            head: HeadKind::GeneralizedGaussian,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config("model.num_classes", "need at least 2 classes"));
        }
        if self.protos_per_class < 1 {
            return Err(Error::config("model.protos_per_class", "must be at least 1"));
        }
        if self.latent_dim < 1 {
            return Err(Error::config("model.latent_dim", "must be at least 1"));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::config("model.alpha", "must be positive"));
        }
        if !(self.beta >= 2.0 && self.beta.is_finite()) {
            return Err(Error::config("model.beta", "must be at least 2"));
        }
        if self.encoder_widths.len() != 5 || self.encoder_widths.contains(&0) {
            return Err(Error::config("model.encoder_widths", "expected five positive widths"));
        }
        if self.decoder_widths.len() != 5 || self.decoder_widths.contains(&0) {
            return Err(Error::config("model.decoder_widths", "expected five positive widths"));
        }
        let s = self.image_shape;
        if s.channels == 0 || s.height % 4 != 0 || s.width % 4 != 0 || s.height == 0 || s.width == 0 {
            return Err(Error::config(
                "model.image_shape",
                format!("{s} must have channels ≥ 1 and height, width divisible by 4"),
            ));
        }
        Ok(())
    }
}

/// Diagonal Gaussian posterior per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentDistribution<F> {
    pub mu: Array2<F>,
    pub log_var: Array2<F>,
}

/// Distances from each latent vector to every prototype.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceTable<F> {
    /// `(N, K, J)` Euclidean distances.
    pub d: Array3<F>,
    /// `(N, K)` index of the nearest prototype within each class.
    pub j_star: Array2<usize>,
    /// `(N, K)` distance to that prototype.
    pub d_star: Array2<F>,
}

#[derive(Debug, Clone)]
pub struct Prediction<F> {
    pub classes: Vec<usize>,
    pub probs: Array2<F>,
    pub distances: DistanceTable<F>,
    pub latent: LatentDistribution<F>,
}

#[derive(Debug, Clone)]
struct Stage {
    conv: Conv2d,
    shuffle: bool,
}

#[derive(Debug, Clone)]
struct Encoder {
    stages: Vec<Stage>,
    head: Dense,
    flat: (usize, usize, usize),
}

#[derive(Debug, Clone)]
struct Decoder {
    seed: Dense,
    seed_shape: (usize, usize, usize),
    stages: Vec<Stage>,
}

pub struct EncoderCache<F> {
    convs: Vec<ConvCache<F>>,
    pre: Vec<Array4<F>>,
    flat: Array2<F>,
}

pub struct DecoderCache<F> {
    z: Array2<F>,
    seed_pre: Array2<F>,
    convs: Vec<ConvCache<F>>,
    /// Pre-activations of every stage (after the pixel shuffle, if any).
    pre: Vec<Array4<F>>,
    output: Array4<F>,
}

/// The full network with its parameters.
#[derive(Debug, Clone)]
pub struct Model<F> {
    pub config: ModelConfig,
    pub params: ParamStore<F>,
    encoder: Encoder,
    decoder: Decoder,
    prototypes: ParamId,
}

/// Builds a freshly initialized model; identical seeds give identical parameters.
pub fn init_model<F: Real>(config: &ModelConfig) -> Result<Model<F>> {
    Model::new(config.clone())
}

impl<F: Real> Model<F> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let he = 2f64.sqrt();
        let shape = config.image_shape;

        let mut stages = Vec::new();
        let (mut c, mut h, mut w) = (shape.channels, shape.height, shape.width);
        for (i, &width) in config.encoder_widths.iter().enumerate() {
            let conv = Conv2d::new(
                &mut params,
                &format!("encoder.conv{i}"),
                ParamGroup::Encoder,
                c,
                width,
                3,
                2,
                1,
                he,
                &mut rng,
            );
            (h, w) = conv.output_size(h, w);
            c = width;
            stages.push(Stage { conv, shuffle: false });
        }
        let head = Dense::new(
            &mut params,
            "encoder.head",
            ParamGroup::Encoder,
            c * h * w,
            2 * config.latent_dim,
            1.0,
            &mut rng,
        );
        let encoder = Encoder {
            stages,
            head,
            flat: (c, h, w),
        };

        let dw = &config.decoder_widths;
        let seed_shape = (dw[0], shape.height / 4, shape.width / 4);
        let seed = Dense::new(
            &mut params,
            "decoder.seed",
            ParamGroup::Decoder,
            config.latent_dim,
            seed_shape.0 * seed_shape.1 * seed_shape.2,
            he,
            &mut rng,
        );
        // (in, out, sub-pixel upsampling)
        let plan = [
            (dw[0], dw[1], true),
            (dw[1], dw[2], true),
            (dw[2], dw[3], false),
            (dw[3], dw[4], false),
            (dw[4], shape.channels, false),
        ];
        let mut dec_stages = Vec::new();
        for (i, &(cin, cout, shuffle)) in plan.iter().enumerate() {
            let out_ch = if shuffle { cout * 4 } else { cout };
            let gain = if i + 1 == plan.len() { 1.0 } else { he };
            let conv = Conv2d::new(
                &mut params,
                &format!("decoder.conv{i}"),
                ParamGroup::Decoder,
                cin,
                out_ch,
                3,
                1,
                1,
                gain,
                &mut rng,
            );
            dec_stages.push(Stage { conv, shuffle });
        }
        let decoder = Decoder {
            seed,
            seed_shape,
            stages: dec_stages,
        };

        let (k, j, l) = (config.num_classes, config.protos_per_class, config.latent_dim);
        let protos = Array3::from_shape_simple_fn((k, j, l), || {
            F::lit(rng.sample::<f64, _>(StandardNormal))
        });
        let prototypes = params.add("prototypes", ParamGroup::Prototypes, protos.into_dyn());

        Ok(Self {
            config,
            params,
            encoder,
            decoder,
            prototypes,
        })
    }

    /// Rebuilds a model around existing parameters, checking names and shapes.
    pub fn from_params(config: ModelConfig, params: ParamStore<F>) -> Result<Self> {
        let mut model = Self::new(config)?;
        if model.params.len() != params.len() {
            return Err(Error::Shape(format!(
                "expected {} parameter tensors, found {}",
                model.params.len(),
                params.len()
            )));
        }
        for (want, got) in model.params.entries().iter().zip(params.entries()) {
            if want.name != got.name || want.value.shape() != got.value.shape() {
                return Err(Error::Tensor {
                    name: got.name.clone(),
                    reason: format!(
                        "expected `{}` with shape {:?}, found shape {:?}",
                        want.name,
                        want.value.shape(),
                        got.value.shape()
                    ),
                });
            }
        }
        model.params = params;
        Ok(model)
    }

    pub fn cast<G: Real>(&self) -> Model<G> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
            prototypes: self.prototypes,
        }
    }

    pub fn prototype_id(&self) -> ParamId {
        self.prototypes
    }

    /// Prototype bank `(K, J, L)`.
    pub fn prototypes(&self) -> ArrayView3<'_, F> {
        self.params
            .get(self.prototypes)
            .view()
            .into_dimensionality::<Ix3>()
            .expect("rank-3 prototypes")
    }

    fn check_images(&self, x: &ArrayView4<F>) -> Result<()> {
        let s = self.config.image_shape;
        let (n, c, h, w) = x.dim();
        if n == 0 || (c, h, w) != (s.channels, s.height, s.width) {
            return Err(Error::Shape(format!(
                "expected a non-empty batch of {s} images, got {:?}",
                x.dim()
            )));
        }
        Ok(())
    }

    pub fn encode(&self, x: ArrayView4<F>) -> Result<LatentDistribution<F>> {
        self.encode_cached(x).map(|(d, _)| d)
    }

    pub fn encode_cached(&self, x: ArrayView4<F>) -> Result<(LatentDistribution<F>, EncoderCache<F>)> {
        self.check_images(&x)?;
        let n = x.dim().0;
        let mut convs = Vec::with_capacity(5);
        let mut pre = Vec::with_capacity(5);
        let mut act = x.to_owned();
        for stage in &self.encoder.stages {
            let (y, cache) = stage.conv.forward(&self.params, act.view());
            act = ops::leaky_relu(y.view());
            convs.push(cache);
            pre.push(y);
        }
        let (c, h, w) = self.encoder.flat;
        let flat = act
            .into_shape_with_order((n, c * h * w))
            .expect("contiguous activations");
        let out = self.encoder.head.forward(&self.params, flat.view());
        let l = self.config.latent_dim;
        let dist = LatentDistribution {
            mu: out.slice(s![.., ..l]).to_owned(),
            log_var: out.slice(s![.., l..]).to_owned(),
        };
        Ok((dist, EncoderCache { convs, pre, flat }))
    }

    /// Accumulates encoder parameter gradients from `∂/∂μ` and `∂/∂log σ²`.
    pub fn encoder_backward(
        &self,
        cache: &EncoderCache<F>,
        dmu: ArrayView2<F>,
        dlog_var: ArrayView2<F>,
        grads: &mut Grads<F>,
    ) {
        let n = dmu.nrows();
        let dout = ndarray::concatenate(Axis(1), &[dmu, dlog_var]).expect("matching rows");
        let dflat = self
            .encoder
            .head
            .backward(&self.params, cache.flat.view(), dout.view(), Some(grads));
        let (c, h, w) = self.encoder.flat;
        let mut dact = dflat.into_shape_with_order((n, c, h, w)).expect("contiguous");
        for (i, stage) in self.encoder.stages.iter().enumerate().rev() {
            let dpre = ops::leaky_relu_backward(cache.pre[i].view(), dact.view());
            match stage
                .conv
                .backward(&self.params, &cache.convs[i], dpre.view(), Some(grads), i > 0)
            {
                Some(dx) => dact = dx,
                None => break,
            }
        }
    }

    pub fn decode(&self, z: ArrayView2<F>) -> Result<Array4<F>> {
        self.decode_cached(z).map(|(x, _)| x)
    }

    pub fn decode_cached(&self, z: ArrayView2<F>) -> Result<(Array4<F>, DecoderCache<F>)> {
        if z.ncols() != self.config.latent_dim || z.nrows() == 0 {
            return Err(Error::Shape(format!(
                "expected latent codes of width {}, got {:?}",
                self.config.latent_dim,
                z.dim()
            )));
        }
        let n = z.nrows();
        let seed_pre = self.decoder.seed.forward(&self.params, z);
        let (c0, h0, w0) = self.decoder.seed_shape;
        let mut act = ops::leaky_relu(seed_pre.view())
            .into_shape_with_order((n, c0, h0, w0))
            .expect("contiguous");
        let mut convs = Vec::new();
        let mut pre = Vec::new();
        let last = self.decoder.stages.len() - 1;
        for (i, stage) in self.decoder.stages.iter().enumerate() {
            let (mut y, cache) = stage.conv.forward(&self.params, act.view());
            if stage.shuffle {
                y = ops::pixel_shuffle(y.view(), 2);
            }
            act = if i == last {
                ops::sigmoid(y.view())
            } else {
                ops::leaky_relu(y.view())
            };
            convs.push(cache);
            pre.push(y);
        }
        let cache = DecoderCache {
            z: z.to_owned(),
            seed_pre,
            convs,
            pre,
            output: act.clone(),
        };
        Ok((act, cache))
    }

    /// Accumulates decoder gradients (when `grads` is given) and returns `∂/∂z`.
    pub fn decoder_backward(
        &self,
        cache: &DecoderCache<F>,
        dout: ArrayView4<F>,
        mut grads: Option<&mut Grads<F>>,
    ) -> Array2<F> {
        let last = self.decoder.stages.len() - 1;
        let mut dact = dout.to_owned();
        for (i, stage) in self.decoder.stages.iter().enumerate().rev() {
            let mut dpre = if i == last {
                ops::sigmoid_backward(cache.output.view(), dact.view())
            } else {
                ops::leaky_relu_backward(cache.pre[i].view(), dact.view())
            };
            if stage.shuffle {
                dpre = ops::pixel_unshuffle(dpre.view(), 2);
            }
            dact = stage
                .conv
                .backward(&self.params, &cache.convs[i], dpre.view(), grads.as_deref_mut(), true)
                .expect("input gradient requested");
        }
        let n = cache.z.nrows();
        let dseed = dact
            .into_shape_with_order((n, cache.seed_pre.ncols()))
            .expect("contiguous");
        let dseed_pre = ops::leaky_relu_backward(cache.seed_pre.view(), dseed.view());
        self.decoder
            .seed
            .backward(&self.params, cache.z.view(), dseed_pre.view(), grads)
    }

    /// Inference path: the posterior mean is used as the latent code.
    pub fn predict(&self, x: ArrayView4<F>) -> Result<Prediction<F>> {
        let latent = self.encode(x)?;
        let distances = prototype_distances(latent.mu.view(), self.prototypes())?;
        let logits = head_logits(self.config.head, distances.d_star.view(), self.config.alpha, self.config.beta);
        let classes = argmax_rows(logits.view());
        let probs = class_probabilities(logits.view());
        Ok(Prediction {
            classes,
            probs,
            distances,
            latent,
        })
    }

    /// Decodes the posterior mean of each input.
    pub fn reconstruct(&self, x: ArrayView4<F>) -> Result<Array4<F>> {
        let latent = self.encode(x)?;
        self.decode(latent.mu.view())
    }
}

/// Reparameterized draw `z = μ + exp(½·log σ²) ⊙ ε`; returns `(z, ε)`.
pub fn sample_latent<F: Real, R: Rng + ?Sized>(dist: &LatentDistribution<F>, rng: &mut R) -> (Array2<F>, Array2<F>) {
    let eps = Array2::from_shape_simple_fn(dist.mu.raw_dim(), || F::lit(rng.sample::<f64, _>(StandardNormal)));
    (reparameterize(dist, eps.view()), eps)
}

pub fn reparameterize<F: Real>(dist: &LatentDistribution<F>, eps: ArrayView2<F>) -> Array2<F> {
    let half = F::lit(0.5);
    ndarray::Zip::from(&dist.mu)
        .and(&dist.log_var)
        .and(&eps)
        .map_collect(|&m, &lv, &e| m + (lv * half).exp() * e)
}

/// Euclidean distances from each row of `z` to every prototype, with the
/// nearest prototype per class (lowest index wins ties).
pub fn prototype_distances<F: Real>(z: ArrayView2<F>, prototypes: ArrayView3<F>) -> Result<DistanceTable<F>> {
    let (n, l) = z.dim();
    let (k, j, pl) = prototypes.dim();
    if l != pl {
        return Err(Error::Shape(format!(
            "latent width {l} does not match prototype width {pl}"
        )));
    }
    let mut d = Array3::zeros((n, k, j));
    let mut j_star = Array2::zeros((n, k));
    let mut d_star = Array2::zeros((n, k));
    for i in 0..n {
        let zi = z.row(i);
        for c in 0..k {
            let mut best = (0usize, F::infinity());
            for p in 0..j {
                let ssq = zi
                    .iter()
                    .zip(prototypes.slice(s![c, p, ..]).iter())
                    .map(|(&a, &b)| (a - b) * (a - b))
                    .fold(F::zero(), |acc, v| acc + v);
                let dist = ssq.max(F::zero()).sqrt();
                d[[i, c, p]] = dist;
                if dist < best.1 {
                    best = (p, dist);
                }
            }
            j_star[[i, c]] = best.0;
            d_star[[i, c]] = best.1;
        }
    }
    Ok(DistanceTable { d, j_star, d_star })
}

/// Generalized-Gaussian logits `l = −(d/α)^β`.
pub fn class_logits<F: Real>(d_star: ArrayView2<F>, alpha: f64, beta: f64) -> Array2<F> {
    let (a, b) = (F::lit(alpha), F::lit(beta));
    d_star.mapv(|d| -(d / a).powf(b))
}

pub fn head_logits<F: Real>(head: HeadKind, d_star: ArrayView2<F>, alpha: f64, beta: f64) -> Array2<F> {
    match head {
        HeadKind::GeneralizedGaussian => class_logits(d_star, alpha, beta),
        HeadKind::Similarity => {
            let eps = F::lit(SIMILARITY_EPS);
            d_star.mapv(|d| ((d * d + F::one()) / (d * d + eps)).ln())
        }
    }
}

/// `∂l/∂d` of the chosen head at distance `d`.
pub fn head_logit_derivative<F: Real>(head: HeadKind, d: F, alpha: f64, beta: f64) -> F {
    match head {
        HeadKind::GeneralizedGaussian => {
            let (a, b) = (F::lit(alpha), F::lit(beta));
            if d <= F::zero() {
                F::zero()
            } else {
                -(b / a) * (d / a).powf(b - F::one())
            }
        }
        HeadKind::Similarity => {
            let two = F::lit(2.0);
            let eps = F::lit(SIMILARITY_EPS);
            two * d / (d * d + F::one()) - two * d / (d * d + eps)
        }
    }
}

/// Row-wise softmax with max subtraction.
pub fn class_probabilities<F: Real>(logits: ArrayView2<F>) -> Array2<F> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Index of the largest value per row; the lowest index wins ties.
pub fn argmax_rows<F: Real>(m: ArrayView2<F>) -> Vec<usize> {
    m.rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Index of the smallest value per row; the lowest index wins ties.
pub fn argmin_rows<F: Real>(m: ArrayView2<F>) -> Vec<usize> {
    m.rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v < row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}
