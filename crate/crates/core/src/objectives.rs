//! Training objective: cross-entropy over distance logits, KL divergence to
//! the nearest true-class prototype, reconstruction error and prototype
//! orthonormality, combined as a weighted sum.

use ndarray::{s, Array1, Array2, Array3, ArrayView2, ArrayView3, ArrayView4, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{head_logit_derivative, head_logits, prototype_distances, reparameterize, LatentDistribution, Model};
use crate::nn::Grads;
use crate::perceptual::ReconstructionMetric;
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub cls: f64,
    pub kl: f64,
    pub rec: f64,
    pub orth: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            cls: 1.0,
            kl: 1.0,
            rec: 1.0,
            orth: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [("cls", self.cls), ("kl", self.kl), ("rec", self.rec), ("orth", self.orth)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("train.weights.{key}"), "must be a finite value ≥ 0"));
            }
        }
        Ok(())
    }
}

/// Unweighted loss terms and their weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls: f64,
    pub kl: f64,
    pub rec: f64,
    pub orth: f64,
    pub total: f64,
}

impl std::fmt::Display for LossBreakdown {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "total={:.6} cls={:.6} kl={:.6} rec={:.6} orth={:.6}",
            self.total, self.cls, self.kl, self.rec, self.orth
        )
    }
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.cls, self.kl, self.rec, self.orth, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Weighted sum of `(cls, kl, rec, orth)`.
pub fn total_loss(parts: (f64, f64, f64, f64), weights: &LossWeights) -> LossBreakdown {
    let (cls, kl, rec, orth) = parts;
    LossBreakdown {
        cls,
        kl,
        rec,
        orth,
        total: weights.cls * cls + weights.kl * kl + weights.rec * rec + weights.orth * orth,
    }
}

/// Batch mean of `−ln P(y|x)` from probabilities.
pub fn cls_loss<F: Real>(probs: ArrayView2<F>, labels: &[usize]) -> F {
    let n = F::lit(labels.len() as f64);
    labels
        .iter()
        .enumerate()
        .fold(F::zero(), |acc, (i, &y)| acc - probs[[i, y]].ln())
        / n
}

/// Batch-mean cross-entropy from logits via log-sum-exp, with `∂/∂logits`.
pub fn cls_loss_from_logits<F: Real>(logits: ArrayView2<F>, labels: &[usize]) -> (F, Array2<F>) {
    let n = F::lit(labels.len() as f64);
    let mut grad = Array2::zeros(logits.raw_dim());
    let mut total = F::zero();
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let sum = row.iter().fold(F::zero(), |s, &v| s + (v - max).exp());
        let lse = max + sum.ln();
        total = total + lse - row[y];
        for (k, &v) in row.iter().enumerate() {
            grad[[i, k]] = (v - lse).exp() / n;
        }
        grad[[i, y]] = grad[[i, y]] - F::one() / n;
    }
    (total / n, grad)
}

/// Batch-mean KL divergence `KL(N(μ, diag σ²) ‖ N(φ_{y, j*(y)}, I))` in closed form.
pub fn kl_loss<F: Real>(
    dist: &LatentDistribution<F>,
    labels: &[usize],
    prototypes: ArrayView3<F>,
    j_star: ArrayView2<usize>,
) -> F {
    kl_loss_with_grad(dist, labels, prototypes, j_star).0
}

/// KL loss with gradients w.r.t. `μ`, `log σ²` and the prototype bank.
pub fn kl_loss_with_grad<F: Real>(
    dist: &LatentDistribution<F>,
    labels: &[usize],
    prototypes: ArrayView3<F>,
    j_star: ArrayView2<usize>,
) -> (F, Array2<F>, Array2<F>, Array3<F>) {
    let n = F::lit(labels.len() as f64);
    let half = F::lit(0.5);
    let mut dmu = Array2::zeros(dist.mu.raw_dim());
    let mut dlv = Array2::zeros(dist.log_var.raw_dim());
    let mut dproto = Array3::zeros(prototypes.raw_dim());
    let mut total = F::zero();
    for (i, &y) in labels.iter().enumerate() {
        let j = j_star[[i, y]];
        let phi = prototypes.slice(s![y, j, ..]);
        for l in 0..phi.len() {
            let lv = dist.log_var[[i, l]];
            let diff = dist.mu[[i, l]] - phi[l];
            total = total + half * (lv.exp() + diff * diff - F::one() - lv);
            dmu[[i, l]] = diff / n;
            dlv[[i, l]] = half * (lv.exp() - F::one()) / n;
            dproto[[y, j, l]] = dproto[[y, j, l]] - diff / n;
        }
    }
    (total / n, dmu, dlv, dproto)
}

/// `(1/K)·Σ_k ‖Φ̃_k Φ̃_kᵀ − I‖²_F` with class-centered prototype rows.
pub fn orth_loss<F: Real>(prototypes: ArrayView3<F>) -> F {
    orth_loss_with_grad(prototypes).0
}

pub fn orth_loss_with_grad<F: Real>(prototypes: ArrayView3<F>) -> (F, Array3<F>) {
    let (k, j, _) = prototypes.dim();
    let kf = F::lit(k as f64);
    let four = F::lit(4.0);
    let mut grad = Array3::zeros(prototypes.raw_dim());
    let mut total = F::zero();
    for c in 0..k {
        let phi = prototypes.index_axis(Axis(0), c);
        let mean = phi.mean_axis(Axis(0)).expect("J ≥ 1");
        let centered = &phi - &mean;
        let mut gram = centered.dot(&centered.t());
        for d in 0..j {
            gram[[d, d]] = gram[[d, d]] - F::one();
        }
        total = total + gram.iter().fold(F::zero(), |s, &v| s + v * v);
        // ∂‖M‖²/∂Φ̃ = 4·M·Φ̃ for symmetric M, then through the centering.
        let dcentered = gram.dot(&centered).mapv(|v| v * four / kf);
        let dmean = dcentered.mean_axis(Axis(0)).expect("J ≥ 1");
        grad.index_axis_mut(Axis(0), c).assign(&(&dcentered - &dmean));
    }
    (total / kf, grad)
}

/// Batch mean of the reconstruction metric.
pub fn rec_loss<F: Real>(x: ArrayView4<F>, x_hat: ArrayView4<F>, metric: &ReconstructionMetric<F>) -> Result<F> {
    let per = metric.per_sample(x, x_hat)?;
    Ok(per.mean().unwrap_or_else(F::zero))
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ObjectiveOptions {
    pub weights: LossWeights,
    /// Report the reconstruction term but send no gradient through it.
    pub freeze_reconstruction: bool,
}

struct Forward<F> {
    breakdown: LossBreakdown,
    grads: Option<Grads<F>>,
}

fn check_labels(labels: &[usize], n: usize, k: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} samples", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::Consistency(format!("label {bad} outside [0, {k})")));
    }
    Ok(())
}

fn run<F: Real>(
    model: &Model<F>,
    x: ArrayView4<F>,
    labels: &[usize],
    eps: ArrayView2<F>,
    metric: &ReconstructionMetric<F>,
    options: &ObjectiveOptions,
    with_grads: bool,
) -> Result<Forward<F>> {
    let cfg = &model.config;
    check_labels(labels, x.dim().0, cfg.num_classes)?;
    let w = &options.weights;
    let (dist, enc_cache) = model.encode_cached(x)?;
    if eps.dim() != dist.mu.dim() {
        return Err(Error::Shape(format!(
            "noise {:?} does not match latent {:?}",
            eps.dim(),
            dist.mu.dim()
        )));
    }
    let z = reparameterize(&dist, eps);
    let protos = model.prototypes();
    let table = prototype_distances(z.view(), protos)?;
    let logits = head_logits(cfg.head, table.d_star.view(), cfg.alpha, cfg.beta);
    let (cls, dlogits) = cls_loss_from_logits(logits.view(), labels);
    let (kl, dmu_kl, dlv_kl, dproto_kl) = kl_loss_with_grad(&dist, labels, protos, table.j_star.view());
    let (orth, dproto_orth) = orth_loss_with_grad(protos);

    let (x_hat, dec_cache) = model.decode_cached(z.view())?;
    let n = x.dim().0;
    let upstream = Array1::from_elem(n, F::lit(w.rec / n as f64));
    let need_rec_grad = with_grads && !options.freeze_reconstruction && w.rec != 0.0;
    let (rec_per, dxhat) = if need_rec_grad {
        let (per, g) = metric.per_sample_with_grad(x, x_hat.view(), &upstream)?;
        (per, Some(g))
    } else {
        (metric.per_sample(x, x_hat.view())?, None)
    };
    let rec = rec_per.mean().unwrap_or_else(F::zero);

    let breakdown = total_loss((cls.as_f64(), kl.as_f64(), rec.as_f64(), orth.as_f64()), w);
    if !with_grads {
        return Ok(Forward { breakdown, grads: None });
    }

    let mut grads = model.params.zero_grads();
    let pid = model.prototype_id();
    let wf = |v: f64| F::lit(v);

    // Classification: through the head and the distances to z and Φ.
    let mut dz = Array2::<F>::zeros(z.raw_dim());
    let mut dproto = Array3::<F>::zeros(protos.raw_dim());
    let (kc, jc) = (cfg.num_classes, cfg.protos_per_class);
    let _ = jc;
    for i in 0..n {
        for k in 0..kc {
            let d = table.d_star[[i, k]];
            if d <= F::zero() {
                continue;
            }
            let dd = dlogits[[i, k]] * head_logit_derivative(cfg.head, d, cfg.alpha, cfg.beta) * wf(w.cls);
            let j = table.j_star[[i, k]];
            for l in 0..cfg.latent_dim {
                let g = dd * (z[[i, l]] - protos[[k, j, l]]) / d;
                dz[[i, l]] = dz[[i, l]] + g;
                dproto[[k, j, l]] = dproto[[k, j, l]] - g;
            }
        }
    }
    dproto.scaled_add(wf(w.kl), &dproto_kl);
    dproto.scaled_add(wf(w.orth), &dproto_orth);
    grads.accumulate(pid, &dproto);

    if let Some(dxhat) = dxhat {
        let dz_rec = model.decoder_backward(&dec_cache, dxhat.view(), Some(&mut grads));
        dz += &dz_rec;
    }

    // Reparameterization: ∂z/∂μ = 1, ∂z/∂log σ² = ½·ε·exp(½·log σ²).
    let half = F::lit(0.5);
    let mut dmu = dz.clone();
    dmu.scaled_add(wf(w.kl), &dmu_kl);
    let mut dlv = ndarray::Zip::from(&dz)
        .and(&eps)
        .and(&dist.log_var)
        .map_collect(|&g, &e, &lv| g * e * half * (lv * half).exp());
    dlv.scaled_add(wf(w.kl), &dlv_kl);
    model.encoder_backward(&enc_cache, dmu.view(), dlv.view(), &mut grads);

    Ok(Forward {
        breakdown,
        grads: Some(grads),
    })
}

/// Full objective on a batch with fixed reparameterization noise `eps`,
/// plus gradients for every model parameter.
///
/// The nearest-prototype selections are treated as constants.
pub fn objective_with_grads<F: Real>(
    model: &Model<F>,
    x: ArrayView4<F>,
    labels: &[usize],
    eps: ArrayView2<F>,
    metric: &ReconstructionMetric<F>,
    options: &ObjectiveOptions,
) -> Result<(LossBreakdown, Grads<F>)> {
    let out = run(model, x, labels, eps, metric, options, true)?;
    Ok((out.breakdown, out.grads.expect("requested")))
}

/// Forward-only evaluation of [`objective_with_grads`].
pub fn objective_value<F: Real>(
    model: &Model<F>,
    x: ArrayView4<F>,
    labels: &[usize],
    eps: ArrayView2<F>,
    metric: &ReconstructionMetric<F>,
    options: &ObjectiveOptions,
) -> Result<LossBreakdown> {
    run(model, x, labels, eps, metric, options, false).map(|o| o.breakdown)
}
