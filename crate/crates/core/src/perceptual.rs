//! Reconstruction error metrics: per-pixel MSE and a deep-feature perceptual
//! distance in the LPIPS style (channel-normalized features, weighted squared
//! differences, spatial mean, summed over layers).

use std::path::Path;
use std::sync::Arc;

use ndarray::{s, Array1, Array4, ArrayView4, Axis, Ix1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ops, Conv2d, ConvCache, ParamGroup, ParamStore};
use crate::real::Real;
use crate::tensor_io;

/// Added to the channel norm before dividing, as in the reference LPIPS code.
pub const NORM_EPS: f64 = 1e-10;

/// Per-channel input shift and scale applied after mapping to `[-1,1]`, as in the reference LPIPS code.
pub const INPUT_SHIFT: [f64; 3] = [-0.030, -0.088, -0.188];
pub const INPUT_SCALE: [f64; 3] = [0.458, 0.448, 0.450];

/// Seed of the built-in random-feature extractor.
pub const DEFAULT_EXTRACTOR_SEED: u64 = 0x5eed_1a1b;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Mse,
    #[default]
    Perceptual,
}

/// One feature stage: a 3×3 convolution followed by ReLU.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub out_channels: usize,
    pub stride: usize,
}

/// Fixed convolutional feature extractor with per-layer channel weights.
#[derive(Debug, Clone)]
pub struct PerceptualExtractor<F> {
    store: ParamStore<F>,
    convs: Vec<Conv2d>,
    specs: Vec<StageSpec>,
}

struct FeatureCache<F> {
    convs: Vec<ConvCache<F>>,
    pre: Vec<Array4<F>>,
}

impl<F: Real> PerceptualExtractor<F> {
    pub fn default_stages() -> Vec<StageSpec> {
        vec![
            StageSpec { out_channels: 16, stride: 1 },
            StageSpec { out_channels: 32, stride: 2 },
            StageSpec { out_channels: 64, stride: 2 },
        ]
    }

    /// Random-feature extractor: He-initialized convolutions, uniform channel weights.
    pub fn random(seed: u64, stages: &[StageSpec]) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut convs = Vec::new();
        let mut cin = 3;
        for (i, spec) in stages.iter().enumerate() {
            let conv = Conv2d::new(
                &mut store,
                &format!("features.{i}"),
                ParamGroup::Extractor,
                cin,
                spec.out_channels,
                3,
                spec.stride,
                1,
                2f64.sqrt(),
                &mut rng,
            );
            convs.push(conv);
            cin = spec.out_channels;
        }
        for (i, spec) in stages.iter().enumerate() {
            let w = Array1::from_elem(spec.out_channels, F::one() / F::lit(spec.out_channels as f64));
            store.add(format!("lin.{i}.weight"), ParamGroup::Extractor, w.into_dyn());
        }
        Self {
            store,
            convs,
            specs: stages.to_vec(),
        }
    }

    pub fn default_random() -> Self {
        Self::random(DEFAULT_EXTRACTOR_SEED, &Self::default_stages())
    }

    /// Loads weights from a tensor container directory.
    ///
    /// Expects `features.{i}.weight` `(C_out, C_in, 3, 3)`, `features.{i}.bias`
    /// and `lin.{i}.weight` `(C_out)`, with stage strides in the `strides` attribute.
    pub fn load(dir: &Path) -> Result<Self> {
        let container = tensor_io::read_container(dir)?;
        let strides: Vec<usize> = container
            .attributes
            .get("strides")
            .cloned()
            .map(serde_json::from_value)
            .transpose()
            .map_err(|e| Error::format(dir, format!("bad `strides` attribute: {e}")))?
            .ok_or_else(|| Error::format(dir, "missing `strides` attribute"))?;
        let mut store = ParamStore::new();
        let mut convs = Vec::new();
        let mut specs = Vec::new();
        for (i, &stride) in strides.iter().enumerate() {
            let w = container.tensor(&format!("features.{i}.weight"))?;
            let b = container.tensor(&format!("features.{i}.bias"))?;
            let shape = w.shape().to_vec();
            if shape.len() != 4 || shape[2] != 3 || shape[3] != 3 || b.shape() != [shape[0]] {
                return Err(Error::Tensor {
                    name: format!("features.{i}.weight"),
                    reason: format!("unexpected shape {shape:?}"),
                });
            }
            let weight = store.add(format!("features.{i}.weight"), ParamGroup::Extractor, w.mapv(|v| F::lit(v as f64)));
            let bias = store.add(format!("features.{i}.bias"), ParamGroup::Extractor, b.mapv(|v| F::lit(v as f64)));
            convs.push(Conv2d {
                weight,
                bias,
                in_channels: shape[1],
                out_channels: shape[0],
                kernel: 3,
                stride,
                pad: 1,
            });
            specs.push(StageSpec {
                out_channels: shape[0],
                stride,
            });
        }
        for (i, spec) in specs.iter().enumerate() {
            let name = format!("lin.{i}.weight");
            let w = container.tensor(&name)?;
            if w.shape() != [spec.out_channels] {
                return Err(Error::Tensor {
                    name,
                    reason: format!("expected {} channel weights", spec.out_channels),
                });
            }
            store.add(name, ParamGroup::Extractor, w.mapv(|v| F::lit(v as f64)));
        }
        if convs.first().is_some_and(|c| c.in_channels != 3) {
            return Err(Error::Tensor {
                name: "features.0.weight".into(),
                reason: "extractor must take 3 input channels".into(),
            });
        }
        Ok(Self { store, convs, specs })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let strides: Vec<usize> = self.specs.iter().map(|s| s.stride).collect();
        let mut attributes = serde_json::Map::new();
        attributes.insert("strides".into(), serde_json::to_value(strides).expect("plain data"));
        let tensors: Vec<(String, ndarray::ArrayD<f32>)> = self
            .store
            .entries()
            .iter()
            .map(|e| (e.name.clone(), e.value.mapv(|v| v.as_f64() as f32)))
            .collect();
        tensor_io::write_container(dir, &attributes, &tensors)
    }

    pub fn cast<G: Real>(&self) -> PerceptualExtractor<G> {
        PerceptualExtractor {
            store: self.store.cast(),
            convs: self.convs.clone(),
            specs: self.specs.clone(),
        }
    }

    pub fn num_layers(&self) -> usize {
        self.convs.len()
    }

    pub fn params(&self) -> &ParamStore<F> {
        &self.store
    }

    pub fn channel_weights(&self, layer: usize) -> ndarray::ArrayView1<'_, F> {
        let id = self
            .store
            .find(&format!("lin.{layer}.weight"))
            .expect("channel weights registered");
        self.store
            .get(id)
            .view()
            .into_dimensionality::<Ix1>()
            .expect("rank 1")
    }

    /// Replicates grayscale to three channels, maps `[0,1]` to `[-1,1]`, then
    /// shifts and scales each channel.
    fn prepare(x: ArrayView4<F>) -> Result<Array4<F>> {
        let (n, c, h, w) = x.dim();
        let three = match c {
            3 => x.to_owned(),
            1 => x.broadcast((n, 3, h, w)).expect("single channel").to_owned(),
            other => {
                return Err(Error::config(
                    "train.rec_metric",
                    format!("perceptual metric needs 1 or 3 channels, got {other}"),
                ))
            }
        };
        let mut out = three;
        for (ch, mut plane) in out.axis_iter_mut(Axis(1)).enumerate() {
            let (shift, scale) = (INPUT_SHIFT[ch], INPUT_SCALE[ch]);
            plane.mapv_inplace(|v| F::lit(((2.0 * v.as_f64() - 1.0) - shift) / scale));
        }
        Ok(out)
    }

    fn features(&self, x: ArrayView4<F>) -> (Vec<Array4<F>>, FeatureCache<F>) {
        let mut feats = Vec::with_capacity(self.convs.len());
        let mut cache = FeatureCache {
            convs: Vec::new(),
            pre: Vec::new(),
        };
        let mut act = x.to_owned();
        for conv in &self.convs {
            let (y, c) = conv.forward(&self.store, act.view());
            act = ops::relu(y.view());
            feats.push(act.clone());
            cache.convs.push(c);
            cache.pre.push(y);
        }
        (feats, cache)
    }

    /// Per-sample perceptual distance.
    pub fn distance(&self, x: ArrayView4<F>, x_hat: ArrayView4<F>) -> Result<Array1<F>> {
        let (fx, _) = self.features(Self::prepare(x)?.view());
        let (fy, _) = self.features(Self::prepare(x_hat)?.view());
        let n = x.dim().0;
        let mut out = Array1::zeros(n);
        for (l, (a, b)) in fx.iter().zip(&fy).enumerate() {
            let na = unit_normalize(a);
            let nb = unit_normalize(b);
            let w = self.channel_weights(l);
            let (_, c, h, wd) = a.dim();
            let hw = F::lit((h * wd) as f64);
            for i in 0..n {
                let mut acc = F::zero();
                for ch in 0..c {
                    let pa = na.slice(s![i, ch, .., ..]);
                    let pb = nb.slice(s![i, ch, .., ..]);
                    let sq = pa
                        .iter()
                        .zip(pb.iter())
                        .fold(F::zero(), |s, (&u, &v)| s + (u - v) * (u - v));
                    acc = acc + w[ch] * sq;
                }
                out[i] = out[i] + acc / hw;
            }
        }
        Ok(out)
    }

    /// Per-sample distance and the gradient of `Σ_n upstream[n]·dist[n]` w.r.t. `x_hat`.
    pub fn distance_with_grad(
        &self,
        x: ArrayView4<F>,
        x_hat: ArrayView4<F>,
        upstream: &Array1<F>,
    ) -> Result<(Array1<F>, Array4<F>)> {
        let (fx, _) = self.features(Self::prepare(x)?.view());
        let (fy, cache) = self.features(Self::prepare(x_hat)?.view());
        let n = x.dim().0;
        let mut out = Array1::zeros(n);
        let mut dfeat = Vec::with_capacity(fy.len());
        let two = F::lit(2.0);
        for (l, (a, b)) in fx.iter().zip(&fy).enumerate() {
            let na = unit_normalize(a);
            let (nb, norms) = unit_normalize_with_norms(b);
            let w = self.channel_weights(l);
            let (_, c, h, wd) = a.dim();
            let hw = F::lit((h * wd) as f64);
            // d/d(nb) of upstream·Σ_c w_c (nb−na)² / HW
            let mut dnb = Array4::zeros(b.raw_dim());
            for i in 0..n {
                let mut acc = F::zero();
                for ch in 0..c {
                    let scale = two * w[ch] * upstream[i] / hw;
                    for y in 0..h {
                        for xx in 0..wd {
                            let diff = nb[[i, ch, y, xx]] - na[[i, ch, y, xx]];
                            acc = acc + w[ch] * diff * diff;
                            dnb[[i, ch, y, xx]] = scale * diff;
                        }
                    }
                }
                out[i] = out[i] + acc / hw;
            }
            dfeat.push(unit_normalize_backward(b, &norms, &dnb));
        }
        // Backpropagate through the stages; later layers' gradients join on the way down.
        let mut dact: Option<Array4<F>> = None;
        for l in (0..self.convs.len()).rev() {
            let mut g = dfeat[l].clone();
            if let Some(d) = dact.take() {
                g += &d;
            }
            let dpre = ops::relu_backward(cache.pre[l].view(), g.view());
            dact = self.convs[l].backward(&self.store, &cache.convs[l], dpre.view(), None, true);
        }
        let mut dx3 = dact.expect("at least one stage");
        for (ch, mut plane) in dx3.axis_iter_mut(Axis(1)).enumerate() {
            let k = F::lit(2.0 / INPUT_SCALE[ch]);
            plane.mapv_inplace(|v| v * k);
        }
        let dx = if x_hat.dim().1 == 1 {
            dx3.sum_axis(Axis(1)).insert_axis(Axis(1))
        } else {
            dx3
        };
        Ok((out, dx))
    }
}

fn channel_norms<F: Real>(f: &Array4<F>) -> ndarray::Array3<F> {
    f.mapv(|v| v * v).sum_axis(Axis(1)).mapv(|v| v.sqrt())
}

fn unit_normalize<F: Real>(f: &Array4<F>) -> Array4<F> {
    unit_normalize_with_norms(f).0
}

fn unit_normalize_with_norms<F: Real>(f: &Array4<F>) -> (Array4<F>, ndarray::Array3<F>) {
    let norms = channel_norms(f);
    let eps = F::lit(NORM_EPS);
    let denom = norms.mapv(|r| r + eps).insert_axis(Axis(1));
    (f / &denom, norms)
}

/// Adjoint of `f ↦ f / (‖f‖ + ε)` along the channel axis.
fn unit_normalize_backward<F: Real>(f: &Array4<F>, norms: &ndarray::Array3<F>, g: &Array4<F>) -> Array4<F> {
    let (n, c, h, w) = f.dim();
    let eps = F::lit(NORM_EPS);
    let mut out = Array4::zeros(f.raw_dim());
    for i in 0..n {
        for y in 0..h {
            for x in 0..w {
                let r = norms[[i, y, x]];
                let denom = r + eps;
                let dot = (0..c).fold(F::zero(), |s, ch| s + f[[i, ch, y, x]] * g[[i, ch, y, x]]);
                let k = if r > F::zero() {
                    dot / (r * denom * denom)
                } else {
                    F::zero()
                };
                for ch in 0..c {
                    out[[i, ch, y, x]] = g[[i, ch, y, x]] / denom - f[[i, ch, y, x]] * k;
                }
            }
        }
    }
    out
}

/// Mean squared difference over `(C, H, W)` per sample.
pub fn mse_error<F: Real>(x: ArrayView4<F>, x_hat: ArrayView4<F>) -> Result<Array1<F>> {
    if x.dim() != x_hat.dim() {
        return Err(Error::Shape(format!(
            "mse inputs differ: {:?} vs {:?}",
            x.dim(),
            x_hat.dim()
        )));
    }
    let per = F::lit((x.len() / x.dim().0.max(1)) as f64);
    Ok(Array1::from_iter(x.outer_iter().zip(x_hat.outer_iter()).map(|(a, b)| {
        a.iter()
            .zip(b.iter())
            .fold(F::zero(), |s, (&u, &v)| s + (u - v) * (u - v))
            / per
    })))
}

/// A reconstruction error, either per-pixel MSE or the perceptual distance.
#[derive(Debug, Clone)]
pub enum ReconstructionMetric<F> {
    Mse,
    Perceptual(Arc<PerceptualExtractor<F>>),
}

impl<F: Real> ReconstructionMetric<F> {
    pub fn kind(&self) -> MetricKind {
        match self {
            ReconstructionMetric::Mse => MetricKind::Mse,
            ReconstructionMetric::Perceptual(_) => MetricKind::Perceptual,
        }
    }

    pub fn perceptual_default() -> Self {
        ReconstructionMetric::Perceptual(Arc::new(PerceptualExtractor::default_random()))
    }

    pub fn from_kind(kind: MetricKind, extractor: &Arc<PerceptualExtractor<F>>) -> Self {
        match kind {
            MetricKind::Mse => ReconstructionMetric::Mse,
            MetricKind::Perceptual => ReconstructionMetric::Perceptual(extractor.clone()),
        }
    }

    pub fn per_sample(&self, x: ArrayView4<F>, x_hat: ArrayView4<F>) -> Result<Array1<F>> {
        match self {
            ReconstructionMetric::Mse => mse_error(x, x_hat),
            ReconstructionMetric::Perceptual(e) => perceptual_error(x, x_hat, e),
        }
    }

    /// Per-sample errors plus the gradient of `Σ_n upstream[n]·err[n]` w.r.t. `x_hat`.
    pub fn per_sample_with_grad(
        &self,
        x: ArrayView4<F>,
        x_hat: ArrayView4<F>,
        upstream: &Array1<F>,
    ) -> Result<(Array1<F>, Array4<F>)> {
        match self {
            ReconstructionMetric::Mse => {
                let err = mse_error(x, x_hat)?;
                let per = F::lit((x.len() / x.dim().0) as f64);
                let two = F::lit(2.0);
                let mut grad = &x_hat - &x;
                for (mut g, &u) in grad.outer_iter_mut().zip(upstream.iter()) {
                    g.mapv_inplace(|v| two * v * u / per);
                }
                Ok((err, grad))
            }
            ReconstructionMetric::Perceptual(e) => e.distance_with_grad(x, x_hat, upstream),
        }
    }
}

pub fn perceptual_error<F: Real>(
    x: ArrayView4<F>,
    x_hat: ArrayView4<F>,
    extractor: &PerceptualExtractor<F>,
) -> Result<Array1<F>> {
    if x.dim() != x_hat.dim() {
        return Err(Error::Shape(format!(
            "perceptual inputs differ: {:?} vs {:?}",
            x.dim(),
            x_hat.dim()
        )));
    }
    extractor.distance(x, x_hat)
}
