//! Synthetic multi-label data with optional outlier corruption, its binary
//! file format, and the two-view batch stream used for pretraining.
//!
//! Each sample has Gaussian latent factors `u`. Attribute `a` is `u[a] > 0`.
//! An image adds one smooth colored pattern per factor, weighted by a signed
//! squashing of that factor, to mid-gray plus pixel noise. The patterns are
//! chosen so the sign of each weight survives cropping, flipping and color
//! jitter.

use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::augment::{make_view_pair, mix_seed, sample_stream, view_dim, AugmentConfig, ImageShape};
use crate::autograd::Tensor;
use crate::binfmt::{read_file, write_file, Reader, Writer};
use crate::error::{Error, Result};
use crate::losses::Pairing;

const DATASET_MAGIC: &[u8; 4] = b"VCLD";
const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub samples: usize,
    pub attributes: usize,
    /// Number of latent factors; the first `attributes` of them define labels.
    pub latent_dim: usize,
    pub shape: ImageShape,
    /// Peak amplitude of each attribute's pattern.
    pub amplitude: f64,
    /// Steepness of the `tanh` mapping a factor to its signed pattern weight.
    pub gain: f64,
    /// Standard deviation of additive pixel noise.
    pub noise_std: f64,
    /// Per-pixel standard deviation of a per-sample random texture (a sum of
    /// fine colored gratings). It carries no label information.
    pub texture: f64,
    /// Seed of the per-sample draws.
    pub seed: u64,
    /// Seed of the attribute patterns, shared by datasets meant to be comparable.
    pub basis_seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            samples: 2048,
            attributes: 8,
            latent_dim: 8,
            shape: ImageShape::new(3, 16, 16),
            amplitude: 0.08,
            gain: 3.0,
            noise_std: 0.1,
            texture: 0.3,
            seed: 0,
            basis_seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(Error::config("data.samples", "must be >= 1"));
        }
        if self.attributes == 0 {
            return Err(Error::config("data.attributes", "must be >= 1"));
        }
        if self.latent_dim < self.attributes {
            return Err(Error::config("data.latent_dim", "must be >= data.attributes"));
        }
        if self.shape.numel() == 0 {
            return Err(Error::config("data.shape", "dimensions must be positive"));
        }
        for (v, field) in [
            (self.amplitude, "amplitude"),
            (self.gain, "gain"),
            (self.noise_std, "noise_std"),
            (self.texture, "texture"),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("data.{field}"), format!("must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Which part of a sample an outlier replaces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutlierMode {
    /// Uniform noise input and random labels.
    #[default]
    InputAndLabels,
    /// Random labels only.
    LabelsOnly,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    shape: ImageShape,
    attributes: usize,
    inputs: Vec<f32>,
    labels: Vec<u8>,
    outlier_mask: Vec<bool>,
}

impl LabeledDataset {
    pub fn new(
        shape: ImageShape,
        attributes: usize,
        inputs: Vec<f32>,
        labels: Vec<u8>,
        outlier_mask: Vec<bool>,
    ) -> Result<Self> {
        let m = outlier_mask.len();
        if m == 0 || attributes == 0 || shape.numel() == 0 {
            return Err(Error::Invalid("dataset needs at least one sample, attribute and input value".into()));
        }
        if inputs.len() != m * shape.numel() || labels.len() != m * attributes {
            return Err(Error::Invalid(format!(
                "inconsistent dataset: {m} samples, {} input values, {} labels",
                inputs.len(),
                labels.len()
            )));
        }
        if labels.iter().any(|l| *l > 1) {
            return Err(Error::Invalid("labels must be 0 or 1".into()));
        }
        Ok(LabeledDataset { shape, attributes, inputs, labels, outlier_mask })
    }

    pub fn len(&self) -> usize {
        self.outlier_mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outlier_mask.is_empty()
    }

    pub fn shape(&self) -> ImageShape {
        self.shape
    }

    pub fn attributes(&self) -> usize {
        self.attributes
    }

    pub fn input_dim(&self) -> usize {
        self.shape.numel()
    }

    pub fn input(&self, i: usize) -> &[f32] {
        let d = self.input_dim();
        &self.inputs[i * d..(i + 1) * d]
    }

    pub fn label(&self, i: usize) -> &[u8] {
        &self.labels[i * self.attributes..(i + 1) * self.attributes]
    }

    pub fn outlier_mask(&self) -> &[bool] {
        &self.outlier_mask
    }

    pub fn outlier_count(&self) -> usize {
        self.outlier_mask.iter().filter(|m| **m).count()
    }

    /// Rows `indices` of the inputs as a `[len, input_dim]` tensor.
    pub fn inputs_tensor(&self, indices: &[usize]) -> Result<Tensor<f32>> {
        let mut data = Vec::with_capacity(indices.len() * self.input_dim());
        for &i in indices {
            data.extend_from_slice(self.input(i));
        }
        Tensor::new([indices.len(), self.input_dim()], data)
    }

    /// Rows `indices` of the labels as a `[len, attributes]` 0/1 tensor.
    pub fn labels_tensor(&self, indices: &[usize]) -> Result<Tensor<f32>> {
        let data = indices.iter().flat_map(|&i| self.label(i).iter().map(|l| *l as f32)).collect();
        Tensor::new([indices.len(), self.attributes], data)
    }

    /// The samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let mut inputs = Vec::with_capacity(indices.len() * self.input_dim());
        let mut labels = Vec::with_capacity(indices.len() * self.attributes);
        let mut mask = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Invalid(format!("sample index {i} out of range for {} samples", self.len())));
            }
            inputs.extend_from_slice(self.input(i));
            labels.extend_from_slice(self.label(i));
            mask.push(self.outlier_mask[i]);
        }
        LabeledDataset::new(self.shape, self.attributes, inputs, labels, mask)
    }

    /// Fraction of positive labels per attribute.
    pub fn positive_rates(&self) -> Vec<f64> {
        let mut counts = vec![0usize; self.attributes];
        for row in self.labels.chunks(self.attributes) {
            for (c, l) in counts.iter_mut().zip(row) {
                *c += *l as usize;
            }
        }
        counts.into_iter().map(|c| c as f64 / self.len() as f64).collect()
    }

    pub fn summary(&self) -> DatasetSummary {
        let outliers = self.outlier_count();
        DatasetSummary {
            samples: self.len(),
            attributes: self.attributes,
            shape: self.shape,
            outliers,
            outlier_fraction: outliers as f64 / self.len() as f64,
            positive_rates: self.positive_rates(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(DATASET_MAGIC, DATASET_VERSION);
        for v in [self.len(), self.attributes, self.shape.channels, self.shape.height, self.shape.width] {
            w.u32(v as u32);
        }
        w.f32s(&self.inputs);
        w.bytes(&self.labels);
        for m in &self.outlier_mask {
            w.u8(*m as u8);
        }
        w.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::open("dataset", bytes, DATASET_MAGIC, DATASET_VERSION)?;
        let header_at = r.offset();
        let mut dims = [0usize; 5];
        for d in dims.iter_mut() {
            *d = r.u32()? as usize;
        }
        let [m, a, c, h, w] = dims;
        if dims.contains(&0) {
            return Err(r.error_at(header_at, format!("zero dimension in header {dims:?}")));
        }
        let shape = ImageShape::new(c, h, w);
        let numel = m
            .checked_mul(shape.numel())
            .filter(|n| n.checked_mul(4).is_some())
            .ok_or_else(|| r.error_at(header_at, "header sizes overflow"))?;
        let inputs = r.f32s(numel)?;
        let labels_at = r.offset();
        let labels = r.take(m * a)?.to_vec();
        if let Some(k) = labels.iter().position(|l| *l > 1) {
            return Err(r.error_at(labels_at + k as u64, format!("label byte {} is not 0 or 1", labels[k])));
        }
        let mask_at = r.offset();
        let mask_bytes = r.take(m)?;
        if let Some(k) = mask_bytes.iter().position(|b| *b > 1) {
            return Err(r.error_at(mask_at + k as u64, format!("mask byte {} is not 0 or 1", mask_bytes[k])));
        }
        let mask = mask_bytes.iter().map(|b| *b == 1).collect();
        r.finish()?;
        LabeledDataset::new(shape, a, inputs, labels, mask)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        LabeledDataset::from_bytes(&read_file(path)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub samples: usize,
    pub attributes: usize,
    pub shape: ImageShape,
    pub outliers: usize,
    pub outlier_fraction: f64,
    pub positive_rates: Vec<f64>,
}

/// Smooth spatial modes over centered coordinates `(row, col)` in
/// `[-0.5, 0.5]`. Each is symmetric under a horizontal flip and keeps its
/// shape (a ramp stays a ramp, a bowl stays a bowl) under crop and resize.
const MODES: [fn(f64, f64) -> f64; 4] =
    [|_, _| 1.0, |r, _| 2.0 * r, |_, c| 12.0 * c * c - 1.0, |r, _| 12.0 * r * r - 1.0];

/// Orthonormal color directions: luminance and two opponent axes.
const COLORS: [[f64; 3]; 3] = [
    [0.577_350_269_189_625_8, 0.577_350_269_189_625_8, 0.577_350_269_189_625_8],
    [std::f64::consts::FRAC_1_SQRT_2, -std::f64::consts::FRAC_1_SQRT_2, 0.0],
    [0.408_248_290_463_863, 0.408_248_290_463_863, -0.816_496_580_927_726],
];

/// Per-factor image pattern, `[channels * height * width]`.
fn patterns(cfg: &GenConfig) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.basis_seed, 0xBA515]));
    let ImageShape { height, width, .. } = cfg.shape;
    let plane = height * width;
    // a constant luminance offset is confounded with brightness jitter, so it is left out
    let mut atoms: Vec<Vec<f64>> = Vec::new();
    for (m, mode) in MODES.iter().enumerate() {
        for (k, color) in COLORS.iter().enumerate() {
            if m == 0 && k == 0 {
                continue;
            }
            let mut img = vec![0.0; 3 * plane];
            for y in 0..height {
                for x in 0..width {
                    let v = mode((y as f64 + 0.5) / height as f64 - 0.5, (x as f64 + 0.5) / width as f64 - 0.5);
                    for c in 0..3 {
                        img[c * plane + y * width + x] = v * color[c];
                    }
                }
            }
            atoms.push(img);
        }
    }
    atoms.shuffle(&mut rng);
    (0..cfg.latent_dim)
        .map(|f| {
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            if f < atoms.len() {
                atoms[f].iter().map(|v| sign * v).collect()
            } else {
                // more factors than atoms: random unit mixtures
                let w: Vec<f64> = (0..atoms.len()).map(|_| rng.sample(StandardNormal)).collect();
                let n = w.iter().map(|v| v * v).sum::<f64>().sqrt();
                (0..3 * plane).map(|i| atoms.iter().zip(&w).map(|(a, wi)| a[i] * wi / n).sum()).collect()
            }
        })
        .collect()
}

/// Random unit-norm direction per latent factor, used for non-image shapes.
fn vector_basis(cfg: &GenConfig) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.basis_seed, 0xB0C5]));
    let d = cfg.shape.numel();
    (0..cfg.latent_dim)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / n).collect()
        })
        .collect()
}

const TEXTURE_WAVES: usize = 12;

fn add_texture(x: &mut [f64], shape: ImageShape, std: f64, rng: &mut impl Rng) {
    let ImageShape { height, width, .. } = shape;
    let plane = height * width;
    let amp = std * (2.0 / TEXTURE_WAVES as f64).sqrt();
    for _ in 0..TEXTURE_WAVES {
        let theta = rng.gen_range(0.0..std::f64::consts::PI);
        let cycles = rng.gen_range(3.0..6.0);
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        let (kx, ky) = (
            std::f64::consts::TAU * cycles * theta.cos() / width as f64,
            std::f64::consts::TAU * cycles * theta.sin() / height as f64,
        );
        let mut color: [f64; 3] = std::array::from_fn(|_| rng.sample(StandardNormal));
        let n = color.iter().map(|c| c * c).sum::<f64>().sqrt().max(1e-9);
        color.iter_mut().for_each(|c| *c *= 3f64.sqrt() / n);
        for y in 0..height {
            for xx in 0..width {
                let wave = amp * (kx * xx as f64 + ky * y as f64 + phase).cos();
                for (c, cv) in color.iter().enumerate() {
                    x[c * plane + y * width + xx] += wave * cv;
                }
            }
        }
    }
}

fn response(u: f64, gain: f64) -> f64 {
    (gain * u).tanh()
}

/// Generated dataset together with the latent factors behind each sample.
pub struct Generated {
    pub dataset: LabeledDataset,
    /// `[samples, latent_dim]`, row-major.
    pub latents: Vec<f64>,
}

pub fn generate_with_latents(cfg: &GenConfig) -> Result<Generated> {
    cfg.validate()?;
    let shape = cfg.shape;
    let (m, k, a) = (cfg.samples, cfg.latent_dim, cfg.attributes);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, 0xDA7A]));
    let mut latents = Vec::with_capacity(m * k);
    let mut inputs = Vec::with_capacity(m * shape.numel());
    let mut labels = Vec::with_capacity(m * a);

    let grid = if shape.is_image() { patterns(cfg) } else { Vec::new() };
    let basis = if shape.is_image() { Vec::new() } else { vector_basis(cfg) };
    let mut x = vec![0f64; shape.numel()];

    for _ in 0..m {
        let u: Vec<f64> = (0..k).map(|_| rng.sample(StandardNormal)).collect();
        labels.extend(u[..a].iter().map(|v| (*v > 0.0) as u8));
        if shape.is_image() {
            x.iter_mut().for_each(|v| *v = 0.5);
            for (p, ui) in grid.iter().zip(&u) {
                let s = cfg.amplitude * response(*ui, cfg.gain);
                for (v, pv) in x.iter_mut().zip(p) {
                    *v += s * pv;
                }
            }
            if cfg.texture > 0.0 {
                add_texture(&mut x, shape, cfg.texture, &mut rng);
            }
            for v in x.iter_mut() {
                let noise: f64 = rng.sample(StandardNormal);
                *v = (*v + cfg.noise_std * noise).clamp(0.0, 1.0);
            }
        } else {
            x.iter_mut().for_each(|v| *v = 0.0);
            for (b, ui) in basis.iter().zip(&u) {
                let s = cfg.amplitude * response(*ui, cfg.gain);
                for (v, bv) in x.iter_mut().zip(b) {
                    *v += s * bv * (shape.numel() as f64).sqrt();
                }
            }
            for v in x.iter_mut() {
                let noise: f64 = rng.sample(StandardNormal);
                *v += cfg.noise_std * noise;
            }
        }
        inputs.extend(x.iter().map(|v| *v as f32));
        latents.extend(u);
    }
    let dataset = LabeledDataset::new(shape, a, inputs, labels, vec![false; m])?;
    Ok(Generated { dataset, latents })
}

pub fn generate_synthetic(cfg: &GenConfig) -> Result<LabeledDataset> {
    Ok(generate_with_latents(cfg)?.dataset)
}

/// Replaces exactly `floor(rho * M)` uniformly chosen samples with outliers.
pub fn inject_outliers(ds: &LabeledDataset, rho: f64, seed: u64, mode: OutlierMode) -> Result<LabeledDataset> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::config("data.rho", format!("must be in [0, 1], got {rho}")));
    }
    let m = ds.len();
    let count = ((rho * m as f64).floor() as usize).min(m);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 0x0u64, 0x7E]));
    let mut chosen = index::sample(&mut rng, m, count).into_vec();
    chosen.sort_unstable();
    let mut out = ds.clone();
    let d = ds.input_dim();
    for i in chosen {
        if mode == OutlierMode::InputAndLabels {
            for v in &mut out.inputs[i * d..(i + 1) * d] {
                *v = rng.gen::<f32>();
            }
        }
        for l in &mut out.labels[i * ds.attributes..(i + 1) * ds.attributes] {
            *l = rng.gen_bool(0.5) as u8;
        }
        out.outlier_mask[i] = true;
    }
    Ok(out)
}

/// `2N` augmented views of `N` samples: views `2k` and `2k+1` come from
/// `indices[k]`.
#[derive(Debug, Clone)]
pub struct ViewBatch {
    pub views: Tensor<f32>,
    pub pairing: Pairing,
    pub indices: Vec<usize>,
}

/// Sample order of one epoch.
pub fn epoch_order(len: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(&[seed, epoch, 0x5EED])));
    order
}

/// Drop-last stream of view batches for one epoch.
pub struct Batches<'a> {
    ds: &'a LabeledDataset,
    aug: &'a AugmentConfig,
    order: Vec<usize>,
    batch: usize,
    seed: u64,
    epoch: u64,
    next: usize,
}

impl Iterator for Batches<'_> {
    type Item = Result<ViewBatch>;

    fn next(&mut self) -> Option<Self::Item> {
        let start = self.next * self.batch;
        if start + self.batch > self.order.len() {
            return None;
        }
        self.next += 1;
        let indices = self.order[start..start + self.batch].to_vec();
        Some(build_batch(self.ds, self.aug, indices, self.seed, self.epoch))
    }
}

impl Batches<'_> {
    pub fn num_batches(&self) -> usize {
        self.order.len() / self.batch
    }
}

pub fn batches<'a>(
    ds: &'a LabeledDataset,
    n: usize,
    aug: &'a AugmentConfig,
    seed: u64,
    epoch: u64,
) -> Result<Batches<'a>> {
    if n < 2 {
        return Err(Error::config("batch_size", format!("must be >= 2, got {n}")));
    }
    if n > ds.len() {
        return Err(Error::config("batch_size", format!("{n} exceeds the dataset size {}", ds.len())));
    }
    Ok(Batches { ds, aug, order: epoch_order(ds.len(), seed, epoch), batch: n, seed, epoch, next: 0 })
}

/// Batch `index` of `epoch`, without generating the batches before it.
pub fn view_batch(
    ds: &LabeledDataset,
    n: usize,
    aug: &AugmentConfig,
    seed: u64,
    epoch: u64,
    index: usize,
) -> Result<ViewBatch> {
    let it = batches(ds, n, aug, seed, epoch)?;
    if index >= it.num_batches() {
        return Err(Error::Invalid(format!("batch {index} out of range for {} batches", it.num_batches())));
    }
    let indices = it.order[index * n..(index + 1) * n].to_vec();
    build_batch(ds, aug, indices, seed, epoch)
}

fn build_batch(
    ds: &LabeledDataset,
    aug: &AugmentConfig,
    indices: Vec<usize>,
    seed: u64,
    epoch: u64,
) -> Result<ViewBatch> {
    let dim = view_dim(ds.shape(), aug);
    let mut data = Vec::with_capacity(2 * indices.len() * dim);
    for &i in &indices {
        let mut rng = sample_stream(seed, epoch, i as u64);
        let (a, b) = make_view_pair(ds.input(i), ds.shape(), aug, &mut rng)?;
        data.extend_from_slice(&a);
        data.extend_from_slice(&b);
    }
    let views = Tensor::new([2 * indices.len(), dim], data)?;
    Ok(ViewBatch { views, pairing: Pairing::adjacent(2 * indices.len())?, indices })
}
