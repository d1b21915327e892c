//! OOD scores, percentile normalization, Lp fusion and AUROC evaluation.
//!
//! Every emitted score is oriented so that larger means more out-of-distribution.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use ndarray::{s, Array1, ArrayView2, ArrayView4, Axis};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datasets::Dataset;
use crate::error::{Error, Result};
use crate::model::{DistanceTable, Model};
use crate::perceptual::{mse_error, PerceptualExtractor, ReconstructionMetric};
use crate::real::Real;

pub const DEFAULT_PERCENTILES: (f64, f64) = (1.0, 99.0);
pub const MIN_NORMALIZER_SAMPLES: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    Msp,
    DistRatio,
    MinDist,
    Mse,
    Perceptual,
}

impl ScoreKind {
    pub const ALL: [ScoreKind; 5] = [
        ScoreKind::Msp,
        ScoreKind::DistRatio,
        ScoreKind::MinDist,
        ScoreKind::Mse,
        ScoreKind::Perceptual,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScoreKind::Msp => "msp",
            ScoreKind::DistRatio => "dist_ratio",
            ScoreKind::MinDist => "min_dist",
            ScoreKind::Mse => "mse",
            ScoreKind::Perceptual => "perceptual",
        }
    }

    pub fn is_distance(self) -> bool {
        matches!(self, ScoreKind::Msp | ScoreKind::DistRatio | ScoreKind::MinDist)
    }

    pub fn is_reconstruction(self) -> bool {
        matches!(self, ScoreKind::Mse | ScoreKind::Perceptual)
    }
}

impl fmt::Display for ScoreKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScoreKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        ScoreKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown score `{s}` (expected one of msp, dist_ratio, min_dist, mse, perceptual)"))
    }
}

/// Norm used to combine the two normalized scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Default)]
pub enum FusionNorm {
    #[serde(rename = "2")]
    L2,
    #[default]
    #[serde(rename = "inf")]
    Inf,
}

impl<'de> Deserialize<'de> for FusionNorm {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(u64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(2) => Ok(FusionNorm::L2),
            Raw::Num(n) => Err(serde::de::Error::custom(format!("unsupported norm {n} (expected 2 or inf)"))),
            Raw::Text(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

impl FromStr for FusionNorm {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "2" | "l2" => Ok(FusionNorm::L2),
            "inf" | "linf" => Ok(FusionNorm::Inf),
            _ => Err(format!("unknown norm `{s}` (expected 2 or inf)")),
        }
    }
}

impl fmt::Display for FusionNorm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionNorm::L2 => "2",
            FusionNorm::Inf => "inf",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub distance_score: ScoreKind,
    pub recon_score: ScoreKind,
    pub p: FusionNorm,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            distance_score: ScoreKind::DistRatio,
            recon_score: ScoreKind::Perceptual,
            p: FusionNorm::Inf,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.distance_score.is_distance() {
            return Err(Error::config(
                "fusion.distance_score",
                format!("`{}` is not a distance score", self.distance_score),
            ));
        }
        if !self.recon_score.is_reconstruction() {
            return Err(Error::config(
                "fusion.recon_score",
                format!("`{}` is not a reconstruction score", self.recon_score),
            ));
        }
        Ok(())
    }
}

/// `1 − max_k P(k|x)`.
pub fn msp_score<F: Real>(probs: ArrayView2<F>) -> Array1<F> {
    probs.map_axis(Axis(1), |row| {
        F::one() - row.iter().copied().fold(F::neg_infinity(), F::max)
    })
}

/// Share of the total distance mass that belongs to the predicted class.
pub fn dist_ratio_score<F: Real>(table: &DistanceTable<F>, predicted: &[usize]) -> Array1<F> {
    let (_, k, _) = table.d.dim();
    Array1::from_iter(predicted.iter().enumerate().map(|(i, &c)| {
        let row = table.d.index_axis(Axis(0), i);
        let total = row.sum();
        if total > F::zero() {
            row.slice(s![c, ..]).sum() / total
        } else {
            F::one() / F::lit(k as f64)
        }
    }))
}

/// Distance to the nearest prototype of any class.
pub fn min_dist_score<F: Real>(table: &DistanceTable<F>) -> Array1<F> {
    table
        .d
        .map_axis(Axis(2), |v| v.iter().copied().fold(F::infinity(), F::min))
        .map_axis(Axis(1), |v| v.iter().copied().fold(F::infinity(), F::min))
}

/// Reconstruction error of the mean-latent reconstruction.
pub fn recon_score<F: Real>(x: ArrayView4<F>, model: &Model<F>, metric: &ReconstructionMetric<F>) -> Result<Array1<F>> {
    let x_hat = model.reconstruct(x)?;
    metric.per_sample(x, x_hat.view())
}

/// Percentile with linear interpolation between order statistics of `sorted`.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q / 100.0 * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreNormalizer {
    pub kind: ScoreKind,
    pub lower: f64,
    pub upper: f64,
    pub percentiles: (f64, f64),
}

pub fn fit_normalizer(kind: ScoreKind, scores: &[f64], percentiles: (f64, f64)) -> Result<ScoreNormalizer> {
    let (lo, hi) = percentiles;
    if !(0.0 <= lo && lo < hi && hi <= 100.0) {
        return Err(Error::Fitting(format!(
            "percentiles ({lo}, {hi}) must satisfy 0 ≤ lo < hi ≤ 100"
        )));
    }
    if scores.len() < MIN_NORMALIZER_SAMPLES {
        return Err(Error::Fitting(format!(
            "{kind}: {} validation scores, need at least {MIN_NORMALIZER_SAMPLES}",
            scores.len()
        )));
    }
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::Fitting(format!("{kind}: non-finite validation score")));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let lower = percentile(&sorted, lo);
    let upper = percentile(&sorted, hi);
    if upper <= lower {
        return Err(Error::Fitting(format!(
            "{kind}: degenerate validation distribution (upper {upper} = lower {lower})"
        )));
    }
    Ok(ScoreNormalizer {
        kind,
        lower,
        upper,
        percentiles,
    })
}

/// `(λ − λ_lower)/(λ_upper − λ_lower)`, clamped below at 0.
pub fn normalize_score(raw: f64, normalizer: &ScoreNormalizer) -> f64 {
    ((raw - normalizer.lower) / (normalizer.upper - normalizer.lower)).max(0.0)
}

pub fn fuse_scores(a: f64, b: f64, p: FusionNorm) -> f64 {
    match p {
        FusionNorm::L2 => a.hypot(b),
        FusionNorm::Inf => a.max(b),
    }
}

/// Probability that an OOD score exceeds an ID score, ties counting one half.
///
/// Computed from midranks of the pooled sample.
pub fn auroc(id_scores: &[f64], ood_scores: &[f64]) -> Result<f64> {
    let (n, m) = (id_scores.len(), ood_scores.len());
    if n == 0 || m == 0 {
        return Err(Error::Evaluation(format!("auroc needs both sets non-empty (id {n}, ood {m})")));
    }
    if id_scores.iter().chain(ood_scores).any(|v| v.is_nan()) {
        return Err(Error::Evaluation("auroc received NaN scores".into()));
    }
    let mut pooled: Vec<(f64, bool)> = id_scores
        .iter()
        .map(|&v| (v, false))
        .chain(ood_scores.iter().map(|&v| (v, true)))
        .collect();
    pooled.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Twice the rank sum keeps midranks integral.
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < pooled.len() {
        let mut j = i;
        while j + 1 < pooled.len() && pooled[j + 1].0 == pooled[i].0 {
            j += 1;
        }
        let twice_midrank = (i + 1 + j + 1) as u128;
        let oods = pooled[i..=j].iter().filter(|e| e.1).count() as u128;
        twice_rank_sum += twice_midrank * oods;
        i = j + 1;
    }
    let m128 = m as u128;
    let twice_u = twice_rank_sum - m128 * (m128 + 1);
    Ok(twice_u as f64 / 2.0 / (n as f64 * m as f64))
}

/// All raw scores for a set of samples, together with predicted classes.
#[derive(Debug, Clone, Default)]
pub struct RawScores {
    pub scores: BTreeMap<ScoreKind, Vec<f64>>,
    pub predicted: Vec<usize>,
}

impl RawScores {
    pub fn len(&self) -> usize {
        self.predicted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.predicted.is_empty()
    }

    pub fn get(&self, kind: ScoreKind) -> &[f64] {
        self.scores.get(&kind).map(Vec::as_slice).unwrap_or(&[])
    }
}

/// Scores every sample of `images` with the mean-latent inference path.
pub fn compute_scores(
    model: &Model<f32>,
    images: ArrayView4<f32>,
    extractor: &Arc<PerceptualExtractor<f32>>,
    batch_size: usize,
) -> Result<RawScores> {
    let n = images.dim().0;
    let batch_size = batch_size.max(1);
    let mut out = RawScores::default();
    for kind in ScoreKind::ALL {
        out.scores.insert(kind, Vec::with_capacity(n));
    }
    let mut start = 0;
    while start < n {
        let end = (start + batch_size).min(n);
        let x = images.slice(s![start..end, .., .., ..]);
        let pred = model.predict(x)?;
        let x_hat = model.decode(pred.latent.mu.view())?;
        let per_kind = [
            (ScoreKind::Msp, msp_score(pred.probs.view())),
            (ScoreKind::DistRatio, dist_ratio_score(&pred.distances, &pred.classes)),
            (ScoreKind::MinDist, min_dist_score(&pred.distances)),
            (ScoreKind::Mse, mse_error(x, x_hat.view())?),
            (ScoreKind::Perceptual, extractor.distance(x, x_hat.view())?),
        ];
        for (kind, values) in per_kind {
            out.scores
                .get_mut(&kind)
                .expect("all kinds inserted")
                .extend(values.iter().map(|&v| v as f64));
        }
        out.predicted.extend(pred.classes);
        start = end;
    }
    Ok(out)
}

/// Fitted normalizers for every score kind.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScorePipeline {
    pub normalizers: BTreeMap<ScoreKind, ScoreNormalizer>,
}

impl ScorePipeline {
    pub fn fit(validation: &RawScores, percentiles: (f64, f64)) -> Result<Self> {
        let mut normalizers = BTreeMap::new();
        for (&kind, values) in &validation.scores {
            normalizers.insert(kind, fit_normalizer(kind, values, percentiles)?);
        }
        Ok(Self { normalizers })
    }

    pub fn is_fitted(&self) -> bool {
        !self.normalizers.is_empty()
    }

    pub fn normalizer(&self, kind: ScoreKind) -> Result<&ScoreNormalizer> {
        self.normalizers.get(&kind).ok_or_else(|| {
            Error::State(format!(
                "no fitted normalizer for `{kind}`; rerun `fit` to fit normalizers on validation data"
            ))
        })
    }

    /// Normalized score of every kind plus the fused score, for one sample.
    pub fn score_sample(
        &self,
        raw: &BTreeMap<ScoreKind, f64>,
        fusion: &FusionConfig,
    ) -> Result<(BTreeMap<ScoreKind, f64>, f64)> {
        let mut normalized = BTreeMap::new();
        for (&kind, &value) in raw {
            if let Some(n) = self.normalizers.get(&kind) {
                normalized.insert(kind, normalize_score(value, n));
            }
        }
        let a = normalized
            .get(&fusion.distance_score)
            .copied()
            .ok_or_else(|| self.normalizer(fusion.distance_score).unwrap_err())?;
        let b = normalized
            .get(&fusion.recon_score)
            .copied()
            .ok_or_else(|| self.normalizer(fusion.recon_score).unwrap_err())?;
        Ok((normalized, fuse_scores(a, b, fusion.p)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRecord {
    pub id: String,
    pub raw: BTreeMap<ScoreKind, f64>,
    pub normalized: BTreeMap<ScoreKind, f64>,
    pub fused: Option<f64>,
    pub is_ood: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub auroc: f64,
    pub id_accuracy: f64,
    pub score_aurocs: BTreeMap<ScoreKind, f64>,
    pub fusion: FusionConfig,
    pub config_fingerprint: String,
    pub n_id: usize,
    pub n_ood: usize,
}

impl EvalReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("report serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&bytes).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })
    }
}

fn records_for(
    set: &str,
    raw: &RawScores,
    pipeline: &ScorePipeline,
    fusion: &FusionConfig,
    is_ood: bool,
) -> Result<Vec<ScoreRecord>> {
    (0..raw.len())
        .map(|i| {
            let sample: BTreeMap<ScoreKind, f64> = raw.scores.iter().map(|(&k, v)| (k, v[i])).collect();
            let (normalized, fused) = pipeline.score_sample(&sample, fusion)?;
            Ok(ScoreRecord {
                id: format!("{set}:{i}"),
                raw: sample,
                normalized,
                fused: Some(fused),
                is_ood,
            })
        })
        .collect()
}

pub fn labels_of(dataset: &Dataset) -> Vec<usize> {
    dataset.manifest.entries.iter().map(|e| e.label).collect()
}

fn fingerprint(model: &Model<f32>, pipeline: &ScorePipeline, fusion: &FusionConfig) -> String {
    let doc = serde_json::json!({
        "model": model.config,
        "normalizers": pipeline.normalizers.values().collect::<Vec<_>>(),
        "fusion": fusion,
    });
    let mut h = Sha256::new();
    h.update(doc.to_string().as_bytes());
    for e in model.params.entries() {
        for v in e.value.iter() {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Scores ID and OOD test sets, returning the report and per-sample records.
pub fn run_benchmark(
    model: &Model<f32>,
    id_test: &Dataset,
    ood_test: &Dataset,
    pipeline: &ScorePipeline,
    fusion: &FusionConfig,
    extractor: &Arc<PerceptualExtractor<f32>>,
    batch_size: usize,
) -> Result<(EvalReport, Vec<ScoreRecord>)> {
    fusion.validate()?;
    if !pipeline.is_fitted() {
        return Err(Error::State(
            "score normalizers are not fitted; rerun `fit` to fit them on validation data".into(),
        ));
    }
    pipeline.normalizer(fusion.distance_score)?;
    pipeline.normalizer(fusion.recon_score)?;
    if id_test.is_empty() || ood_test.is_empty() {
        return Err(Error::Evaluation(format!(
            "empty evaluation set (id {}, ood {})",
            id_test.len(),
            ood_test.len()
        )));
    }
    let id_raw = compute_scores(model, id_test.pixels().view(), extractor, batch_size)?;
    let ood_raw = compute_scores(model, ood_test.pixels().view(), extractor, batch_size)?;

    let labels = labels_of(id_test);
    let correct = id_raw.predicted.iter().zip(&labels).filter(|(p, y)| p == y).count();

    let mut records = records_for("id", &id_raw, pipeline, fusion, false)?;
    records.extend(records_for("ood", &ood_raw, pipeline, fusion, true)?);
    let fused_id: Vec<f64> = records.iter().filter(|r| !r.is_ood).filter_map(|r| r.fused).collect();
    let fused_ood: Vec<f64> = records.iter().filter(|r| r.is_ood).filter_map(|r| r.fused).collect();

    let mut score_aurocs = BTreeMap::new();
    for kind in ScoreKind::ALL {
        score_aurocs.insert(kind, auroc(id_raw.get(kind), ood_raw.get(kind))?);
    }
    let report = EvalReport {
        auroc: auroc(&fused_id, &fused_ood)?,
        id_accuracy: correct as f64 / labels.len() as f64,
        score_aurocs,
        fusion: *fusion,
        config_fingerprint: fingerprint(model, pipeline, fusion),
        n_id: id_test.len(),
        n_ood: ood_test.len(),
    };
    Ok((report, records))
}

/// Writes records as CSV: `id,raw_<kind>...,norm_<kind>...,fused,is_ood`.
pub fn write_score_csv(path: &Path, records: &[ScoreRecord]) -> Result<()> {
    let kinds: Vec<ScoreKind> = records
        .first()
        .map(|r| r.raw.keys().copied().collect())
        .unwrap_or_default();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    let mut header = vec!["id".to_string()];
    header.extend(kinds.iter().map(|k| format!("raw_{k}")));
    header.extend(kinds.iter().map(|k| format!("norm_{k}")));
    header.push("fused".into());
    header.push("is_ood".into());
    w.write_record(&header).map_err(|e| Error::format(path, e.to_string()))?;
    for r in records {
        let mut row = vec![r.id.clone()];
        row.extend(kinds.iter().map(|k| r.raw.get(k).map(f64::to_string).unwrap_or_default()));
        row.extend(kinds.iter().map(|k| r.normalized.get(k).map(f64::to_string).unwrap_or_default()));
        row.push(r.fused.map(|v| v.to_string()).unwrap_or_default());
        row.push(u8::from(r.is_ood).to_string());
        w.write_record(&row).map_err(|e| Error::format(path, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads back the `(fused, is_ood)` columns of a score CSV.
pub fn read_fused_scores(path: &Path) -> Result<Vec<(f64, bool)>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    let headers = r.headers().map_err(|e| Error::format(path, e.to_string()))?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::format(path, format!("missing column `{name}`")))
    };
    let (fused, ood) = (col("fused")?, col("is_ood")?);
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::format(path, e.to_string()))?;
        let v: f64 = rec[fused]
            .parse()
            .map_err(|_| Error::format(path, format!("bad fused value `{}`", &rec[fused])))?;
        out.push((v, &rec[ood] == "1"));
    }
    Ok(out)
}
