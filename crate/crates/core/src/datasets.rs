//! Dataset ingestion: IDX files, CSV/JSON image manifests, splits and batching.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::imageops::{self, FilterType};
use image::{ImageBuffer, Luma};
use ndarray::{s, Array4, ArrayView3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageShape {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub fn numel(&self) -> usize {
        self.channels * self.height * self.width
    }
}

impl fmt::Display for ImageShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{})", self.channels, self.height, self.width)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim() {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}` (expected train, val or test)")),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// Where a sample's pixels come from.
///
/// Serialized as the plain path, or `#<index>` for a record inside an IDX file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SampleSource {
    Path(PathBuf),
    Offset(usize),
}

impl fmt::Display for SampleSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SampleSource::Path(p) => write!(f, "{}", p.display()),
            SampleSource::Offset(i) => write!(f, "#{i}"),
        }
    }
}

impl FromStr for SampleSource {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.strip_prefix('#') {
            Some(idx) => idx
                .parse()
                .map(SampleSource::Offset)
                .map_err(|e| format!("bad offset `{s}`: {e}")),
            None => Ok(SampleSource::Path(PathBuf::from(s))),
        }
    }
}

impl Serialize for SampleSource {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for SampleSource {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    #[serde(rename = "path")]
    pub source: SampleSource,
    pub label: usize,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub class_names: Vec<String>,
    pub image_shape: ImageShape,
}

impl DatasetManifest {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.num_classes();
        if let Some(e) = self.entries.iter().find(|e| e.label >= k) {
            return Err(Error::Consistency(format!(
                "entry {} has label {} but only {k} classes are declared",
                e.source, e.label
            )));
        }
        Ok(())
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    /// SHA-256 over the canonical JSON form, hex encoded.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("manifest serializes");
        hex_digest(&json)
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// A manifest together with its decoded pixels, one `(C, H, W)` image per entry.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pixels: Array4<f32>,
}

/// Float images in `[0, 1]` with optional labels.
#[derive(Debug, Clone)]
pub struct ImageBatch {
    pub data: Array4<f32>,
    pub labels: Option<Vec<usize>>,
    /// Positions of the samples in the originating manifest.
    pub indices: Vec<usize>,
}

impl ImageBatch {
    pub fn len(&self) -> usize {
        self.data.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn unlabeled(data: Array4<f32>) -> Self {
        let n = data.dim().0;
        Self {
            data,
            labels: None,
            indices: (0..n).collect(),
        }
    }
}

impl Dataset {
    pub fn new(manifest: DatasetManifest, pixels: Array4<f32>) -> Result<Self> {
        manifest.validate()?;
        let shape = manifest.image_shape;
        if pixels.dim() != (manifest.entries.len(), shape.channels, shape.height, shape.width) {
            return Err(Error::Shape(format!(
                "pixel array {:?} does not match {} entries of shape {shape}",
                pixels.dim(),
                manifest.entries.len()
            )));
        }
        Ok(Self { manifest, pixels })
    }

    pub fn len(&self) -> usize {
        self.manifest.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn image(&self, index: usize) -> ArrayView3<'_, f32> {
        self.pixels.slice(s![index, .., .., ..])
    }

    pub fn pixels(&self) -> &Array4<f32> {
        &self.pixels
    }

    /// Gathers the given manifest positions into one batch.
    pub fn batch(&self, indices: &[usize]) -> ImageBatch {
        let shape = self.manifest.image_shape;
        let mut data = Array4::zeros((indices.len(), shape.channels, shape.height, shape.width));
        for (row, &i) in indices.iter().enumerate() {
            data.slice_mut(s![row, .., .., ..]).assign(&self.image(i));
        }
        ImageBatch {
            data,
            labels: Some(indices.iter().map(|&i| self.manifest.entries[i].label).collect()),
            indices: indices.to_vec(),
        }
    }

    /// Keeps only the entries for which `keep` returns true.
    pub fn filter(&self, mut keep: impl FnMut(usize, &ManifestEntry) -> bool) -> Dataset {
        let idx: Vec<usize> = self
            .manifest
            .entries
            .iter()
            .enumerate()
            .filter(|(i, e)| keep(*i, e))
            .map(|(i, _)| i)
            .collect();
        let batch = self.batch(&idx);
        Dataset {
            manifest: DatasetManifest {
                entries: idx.iter().map(|&i| self.manifest.entries[i].clone()).collect(),
                class_names: self.manifest.class_names.clone(),
                image_shape: self.manifest.image_shape,
            },
            pixels: batch.data,
        }
    }

    /// Entries of one split, in manifest order, optionally truncated.
    pub fn split(&self, split: Split, limit: Option<usize>) -> Dataset {
        let mut taken = 0;
        self.filter(|_, e| {
            let keep = e.split == split && limit.is_none_or(|l| taken < l);
            if keep {
                taken += 1;
            }
            keep
        })
    }

    /// The test split when there is one, otherwise every sample.
    pub fn evaluation_set(&self) -> Dataset {
        if self.manifest.split_indices(Split::Test).is_empty() {
            self.clone()
        } else {
            self.split(Split::Test, None)
        }
    }

    /// The first `n` samples.
    pub fn head(&self, n: usize) -> Dataset {
        self.filter(|i, _| i < n)
    }

    /// Sets every entry's split tag.
    pub fn with_split(mut self, split: Split) -> Self {
        for e in &mut self.manifest.entries {
            e.split = split;
        }
        self
    }

    /// Moves a seeded random `fraction` of the train entries to the val split.
    pub fn carve_validation(mut self, fraction: f64, seed: u64) -> Self {
        let mut train = self.manifest.split_indices(Split::Train);
        let n_val = (train.len() as f64 * fraction).round() as usize;
        train.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        for &i in &train[..n_val] {
            self.manifest.entries[i].split = Split::Val;
        }
        self
    }

    /// Assigns train/val/test tags by seeded shuffle with the given ratios.
    pub fn assign_splits(mut self, ratios: (f64, f64, f64), seed: u64) -> Self {
        let total = ratios.0 + ratios.1 + ratios.2;
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n = order.len() as f64;
        let n_train = (n * ratios.0 / total).round() as usize;
        let n_val = (n * ratios.1 / total).round() as usize;
        for (pos, &i) in order.iter().enumerate() {
            self.manifest.entries[i].split = if pos < n_train {
                Split::Train
            } else if pos < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
        }
        self
    }

    /// Appends `other`; offsets keep their meaning only within each part.
    pub fn concat(self, other: Dataset) -> Result<Dataset> {
        if self.manifest.image_shape != other.manifest.image_shape {
            return Err(Error::Consistency(format!(
                "cannot concatenate image shapes {} and {}",
                self.manifest.image_shape, other.manifest.image_shape
            )));
        }
        let mut manifest = self.manifest;
        if other.manifest.class_names.len() > manifest.class_names.len() {
            manifest.class_names = other.manifest.class_names.clone();
        }
        manifest.entries.extend(other.manifest.entries);
        let pixels = ndarray::concatenate(ndarray::Axis(0), &[self.pixels.view(), other.pixels.view()])
            .expect("same trailing shape");
        Dataset::new(manifest, pixels)
    }

    /// Converts pixel channels to `channels` and resizes to `(height, width)`.
    pub fn conform(&self, target: ImageShape) -> Result<Dataset> {
        let src = self.manifest.image_shape;
        if src == target {
            return Ok(self.clone());
        }
        let mut out = Array4::zeros((self.len(), target.channels, target.height, target.width));
        for i in 0..self.len() {
            let img = conform_image(self.image(i), target).map_err(|reason| Error::Ingestion {
                entry: self.manifest.entries[i].source.to_string(),
                reason,
            })?;
            out.slice_mut(s![i, .., .., ..]).assign(&img);
        }
        let mut manifest = self.manifest.clone();
        manifest.image_shape = target;
        Dataset::new(manifest, out)
    }
}

fn read_u32_be(bytes: &[u8], at: usize) -> Option<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
}

/// Raw contents of an IDX image file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<IdxImages> {
    let magic = read_u32_be(bytes, 0).ok_or_else(|| Error::format(path, "file shorter than header"))?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(
            path,
            format!("bad magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        ));
    }
    let header = |at| read_u32_be(bytes, at).ok_or_else(|| Error::format(path, "truncated header"));
    let count = header(4)? as usize;
    let rows = header(8)? as usize;
    let cols = header(12)? as usize;
    let body = &bytes[16..];
    if body.len() != count * rows * cols {
        return Err(Error::format(
            path,
            format!(
                "expected {} pixel bytes for {count}×{rows}×{cols}, found {}",
                count * rows * cols,
                body.len()
            ),
        ));
    }
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels: body.to_vec(),
    })
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    let magic = read_u32_be(bytes, 0).ok_or_else(|| Error::format(path, "file shorter than header"))?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format(
            path,
            format!("bad magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        ));
    }
    let count = read_u32_be(bytes, 4).ok_or_else(|| Error::format(path, "truncated header"))? as usize;
    let body = &bytes[8..];
    if body.len() != count {
        return Err(Error::format(
            path,
            format!("expected {count} label bytes, found {}", body.len()),
        ));
    }
    Ok(body.to_vec())
}

/// Loads a pair of IDX files (images and labels) as a single-channel dataset.
///
/// All entries are tagged `train`; use [`Dataset::with_split`],
/// [`Dataset::carve_validation`] or [`Dataset::assign_splits`] afterwards.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img_bytes = fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let lbl_bytes = fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    let images = parse_idx_images(&img_bytes, images_path)?;
    let labels = parse_idx_labels(&lbl_bytes, labels_path)?;
    if images.count != labels.len() {
        return Err(Error::Consistency(format!(
            "{} holds {} images but {} holds {} labels",
            images_path.display(),
            images.count,
            labels_path.display(),
            labels.len()
        )));
    }
    let num_classes = labels.iter().copied().max().map_or(0, |m| m as usize + 1).max(10);
    let shape = ImageShape::new(1, images.rows, images.cols);
    let pixels = Array4::from_shape_vec(
        (images.count, 1, images.rows, images.cols),
        images.pixels.iter().map(|&b| b as f32 / 255.0).collect(),
    )
    .expect("length checked against header");
    let manifest = DatasetManifest {
        entries: labels
            .iter()
            .enumerate()
            .map(|(i, &l)| ManifestEntry {
                source: SampleSource::Offset(i),
                label: l as usize,
                split: Split::Train,
            })
            .collect(),
        class_names: (0..num_classes).map(|k| k.to_string()).collect(),
        image_shape: shape,
    };
    Dataset::new(manifest, pixels)
}

/// Paths of an IDX image/label pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdxPair {
    pub images: PathBuf,
    pub labels: PathBuf,
}

/// Loads an MNIST-style benchmark: the train pair with `val_fraction` of it
/// carved out as validation, followed by the test pair.
pub fn load_idx_benchmark(train: &IdxPair, test: &IdxPair, val_fraction: f64, seed: u64) -> Result<Dataset> {
    let train = load_idx(&train.images, &train.labels)?.carve_validation(val_fraction, seed);
    let test = load_idx(&test.images, &test.labels)?.with_split(Split::Test);
    train.concat(test)
}

#[derive(Debug, Deserialize)]
struct ManifestRow {
    path: String,
    label: usize,
    split: String,
}

/// Options for turning manifest images into tensors.
#[derive(Debug, Clone)]
pub struct ManifestOptions {
    pub image_shape: ImageShape,
    /// Declared class count; inferred from the largest label when absent.
    pub num_classes: Option<usize>,
}

/// Reads a CSV (`path,label,split`) or JSON manifest and decodes its images.
///
/// Relative paths resolve against the manifest's directory.
pub fn load_manifest(manifest_path: &Path, options: &ManifestOptions) -> Result<Dataset> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let is_json = manifest_path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("json"));
    let rows: Vec<ManifestRow> = if is_json {
        serde_json::from_str(&text).map_err(|source| Error::Json {
            path: manifest_path.to_path_buf(),
            source,
        })?
    } else {
        let mut rdr = csv::Reader::from_reader(text.as_bytes());
        rdr.deserialize()
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::format(manifest_path, e.to_string()))?
    };
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let shape = options.image_shape;
    let mut entries = Vec::with_capacity(rows.len());
    let mut pixels = Array4::zeros((rows.len(), shape.channels, shape.height, shape.width));
    for (i, row) in rows.into_iter().enumerate() {
        let split = row.split.parse().map_err(|reason| Error::Ingestion {
            entry: row.path.clone(),
            reason,
        })?;
        let full = base.join(&row.path);
        let img = decode_image(&full, shape).map_err(|reason| Error::Ingestion {
            entry: row.path.clone(),
            reason,
        })?;
        pixels.slice_mut(s![i, .., .., ..]).assign(&img);
        entries.push(ManifestEntry {
            source: SampleSource::Path(PathBuf::from(row.path)),
            label: row.label,
            split,
        });
    }
    let num_classes = options
        .num_classes
        .unwrap_or_else(|| entries.iter().map(|e| e.label + 1).max().unwrap_or(0));
    let manifest = DatasetManifest {
        entries,
        class_names: (0..num_classes).map(|k| k.to_string()).collect(),
        image_shape: shape,
    };
    Dataset::new(manifest, pixels)
}

/// Loads a data source: `idx:<images>:<labels>` or a `.csv`/`.json` manifest.
///
/// IDX samples are tagged `train` and conformed to `options.image_shape`.
pub fn load_source(spec: &str, options: &ManifestOptions) -> Result<Dataset> {
    if let Some(rest) = spec.strip_prefix("idx:") {
        let (images, labels) = rest.split_once(':').ok_or_else(|| {
            Error::config("data", format!("IDX source `{spec}` must read idx:<images>:<labels>"))
        })?;
        let ds = load_idx(Path::new(images), Path::new(labels))?;
        if let Some(k) = options.num_classes {
            if let Some(bad) = ds.manifest.entries.iter().find(|e| e.label >= k) {
                return Err(Error::Consistency(format!(
                    "{images}: label {} outside the configured {k} classes",
                    bad.label
                )));
            }
        }
        return ds.conform(options.image_shape);
    }
    load_manifest(Path::new(spec), options)
}

/// Writes the manifest entries as CSV or JSON, chosen by extension.
pub fn write_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
    let bytes = if is_json {
        serde_json::to_vec_pretty(&manifest.entries).expect("entries serialize")
    } else {
        let mut w = csv::Writer::from_writer(Vec::new());
        for e in &manifest.entries {
            w.serialize(e).map_err(|e| Error::format(path, e.to_string()))?;
        }
        w.into_inner().expect("in-memory writer")
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn decode_image(path: &Path, target: ImageShape) -> std::result::Result<ndarray::Array3<f32>, String> {
    if !path.exists() {
        return Err(format!("file not found: {}", path.display()));
    }
    let img = image::open(path).map_err(|e| e.to_string())?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let planes = if img.color().has_color() {
        let rgb = img.to_rgb32f().into_raw();
        ndarray::Array3::from_shape_fn((3, h, w), |(c, y, x)| rgb[(y * w + x) * 3 + c])
    } else {
        let gray = img.to_luma32f().into_raw();
        ndarray::Array3::from_shape_fn((1, h, w), |(_, y, x)| gray[y * w + x])
    };
    conform_image(planes.view(), target)
}

/// Channel conversion (luminance or replication) followed by bilinear resize.
pub fn conform_image(img: ArrayView3<f32>, target: ImageShape) -> std::result::Result<ndarray::Array3<f32>, String> {
    let (c, h, w) = img.dim();
    let converted = match (c, target.channels) {
        (a, b) if a == b => img.to_owned(),
        (3, 1) => {
            let lum = &img.slice(s![0, .., ..]) * 0.299
                + &img.slice(s![1, .., ..]) * 0.587
                + &img.slice(s![2, .., ..]) * 0.114;
            lum.insert_axis(ndarray::Axis(0))
        }
        (1, n) => img.broadcast((n, h, w)).expect("single plane").to_owned(),
        (a, b) => return Err(format!("cannot convert {a} channels to {b}")),
    };
    if (h, w) == (target.height, target.width) {
        return Ok(converted.mapv(|v| v.clamp(0.0, 1.0)));
    }
    let mut out = ndarray::Array3::zeros((target.channels, target.height, target.width));
    for ch in 0..target.channels {
        let plane: Vec<f32> = converted.slice(s![ch, .., ..]).iter().copied().collect();
        let buf: ImageBuffer<Luma<f32>, Vec<f32>> =
            ImageBuffer::from_raw(w as u32, h as u32, plane).expect("plane length");
        let resized = imageops::resize(&buf, target.width as u32, target.height as u32, FilterType::Triangle);
        for (dst, src) in out.slice_mut(s![ch, .., ..]).iter_mut().zip(resized.into_raw()) {
            *dst = src.clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

/// Iterator over the batches of one split.
#[derive(Debug)]
pub struct Batches<'a> {
    dataset: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    cursor: usize,
}

impl Batches<'_> {
    pub fn num_batches(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }
}

impl Iterator for Batches<'_> {
    type Item = ImageBatch;

    fn next(&mut self) -> Option<ImageBatch> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let batch = self.dataset.batch(&self.order[self.cursor..end]);
        self.cursor = end;
        Some(batch)
    }
}

/// Partitions one split into batches; a seed shuffles, no seed keeps manifest order.
pub fn make_batches(dataset: &Dataset, split: Split, batch_size: usize, shuffle_seed: Option<u64>) -> Result<Batches<'_>> {
    if batch_size == 0 {
        return Err(Error::config("train.batch_size", "must be at least 1"));
    }
    let mut order = dataset.manifest.split_indices(split);
    if order.is_empty() {
        log::warn!("split `{split}` is empty; producing no batches");
    }
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(Batches {
        dataset,
        order,
        batch_size,
        cursor: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_images(count: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        for x in [IDX_IMAGES_MAGIC, count, rows, cols] {
            v.extend_from_slice(&x.to_be_bytes());
        }
        v.extend_from_slice(pixels);
        v
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        v.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        v.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        v.extend_from_slice(labels);
        v
    }

    fn toy(n: usize) -> Dataset {
        let manifest = DatasetManifest {
            entries: (0..n)
                .map(|i| ManifestEntry {
                    source: SampleSource::Offset(i),
                    label: i % 3,
                    split: Split::Train,
                })
                .collect(),
            class_names: vec!["a".into(), "b".into(), "c".into()],
            image_shape: ImageShape::new(1, 2, 2),
        };
        let pixels = Array4::from_shape_fn((n, 1, 2, 2), |(i, _, _, _)| i as f32 / n as f32);
        Dataset::new(manifest, pixels).unwrap()
    }

    #[test]
    fn idx_pixels_scale_by_255() {
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("img");
        let lp = dir.path().join("lbl");
        fs::write(&ip, idx_images(2, 1, 3, &[0, 128, 255, 255, 0, 128])).unwrap();
        fs::write(&lp, idx_labels(&[3, 7])).unwrap();
        let ds = load_idx(&ip, &lp).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.manifest.image_shape, ImageShape::new(1, 1, 3));
        let got: Vec<f32> = ds.pixels().iter().copied().collect();
        let expect: Vec<f32> = [0u8, 128, 255, 255, 0, 128].iter().map(|&b| b as f32 / 255.0).collect();
        assert_eq!(got, expect);
        assert_eq!(got[2], 1.0);
        assert_eq!(got[0], 0.0);
        assert_eq!(ds.manifest.entries[1].label, 7);
    }

    #[test]
    fn idx_bad_magic_is_format_error() {
        let mut bytes = idx_images(1, 1, 1, &[5]);
        bytes[3] = 0x01;
        let err = parse_idx_images(&bytes, Path::new("x")).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");
        let err = parse_idx_labels(&idx_images(1, 1, 1, &[5]), Path::new("y")).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
    }

    #[test]
    fn idx_count_mismatch_is_consistency_error() {
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("img");
        let lp = dir.path().join("lbl");
        fs::write(&ip, idx_images(2, 1, 1, &[1, 2])).unwrap();
        fs::write(&lp, idx_labels(&[0, 1, 2])).unwrap();
        assert!(matches!(load_idx(&ip, &lp), Err(Error::Consistency(_))));
    }

    #[test]
    fn batches_partition_4_4_2() {
        let ds = toy(10);
        let sizes: Vec<usize> = make_batches(&ds, Split::Train, 4, None)
            .unwrap()
            .map(|b| b.len())
            .collect();
        assert_eq!(sizes, vec![4, 4, 2]);
    }

    #[test]
    fn batches_are_reproducible_and_cover_the_split() {
        let ds = toy(23).carve_validation(0.2, 1);
        let a: Vec<usize> = make_batches(&ds, Split::Train, 5, Some(11))
            .unwrap()
            .flat_map(|b| b.indices)
            .collect();
        let b: Vec<usize> = make_batches(&ds, Split::Train, 5, Some(11))
            .unwrap()
            .flat_map(|b| b.indices)
            .collect();
        assert_eq!(a, b);
        let mut sorted = a.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, ds.manifest.split_indices(Split::Train));
        let unshuffled: Vec<usize> = make_batches(&ds, Split::Train, 5, None)
            .unwrap()
            .flat_map(|b| b.indices)
            .collect();
        assert_eq!(unshuffled, ds.manifest.split_indices(Split::Train));
    }

    #[test]
    fn empty_split_yields_no_batches() {
        let ds = toy(4);
        assert_eq!(make_batches(&ds, Split::Test, 2, None).unwrap().count(), 0);
        assert!(make_batches(&ds, Split::Train, 0, None).is_err());
    }

    #[test]
    fn split_ratios_default_protocol() {
        let ds = toy(100).assign_splits((0.6, 0.1, 0.3), 5);
        assert_eq!(ds.manifest.split_indices(Split::Train).len(), 60);
        assert_eq!(ds.manifest.split_indices(Split::Val).len(), 10);
        assert_eq!(ds.manifest.split_indices(Split::Test).len(), 30);
    }

    #[test]
    fn luminance_and_replication() {
        let rgb = ndarray::Array3::from_shape_fn((3, 1, 1), |(c, _, _)| [1.0f32, 0.5, 0.0][c]);
        let g = conform_image(rgb.view(), ImageShape::new(1, 1, 1)).unwrap();
        assert!((g[[0, 0, 0]] - (0.299 + 0.5 * 0.587)).abs() < 1e-6);
        let gray = ndarray::Array3::from_elem((1, 2, 2), 0.25f32);
        let rep = conform_image(gray.view(), ImageShape::new(3, 2, 2)).unwrap();
        assert!(rep.iter().all(|&v| v == 0.25));
    }

    #[test]
    fn bilinear_resize_preserves_constants() {
        let img = ndarray::Array3::from_elem((1, 32, 32), 0.37f32);
        let out = conform_image(img.view(), ImageShape::new(1, 28, 28)).unwrap();
        assert_eq!(out.dim(), (1, 28, 28));
        assert!(out.iter().all(|&v| (v - 0.37).abs() < 1e-6));
    }
}
