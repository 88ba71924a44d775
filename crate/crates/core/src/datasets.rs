//! Image datasets with noisy labels: synthetic generation, label-noise
//! injection and the on-disk directory format.
//!
//! A dataset directory holds
//!
//! - `manifest.json`: the [`DatasetManifest`] fields,
//! - `images.bin`: `u8` pixels, row-major `N x H x W x C`,
//! - `labels_noisy.bin`: `u16` little-endian class indices, length `N`,
//! - `labels_clean.bin`: optional, same format.
//!
//! Pixels are stored as 8-bit integers everywhere and read as `q / 255`, so a
//! save/load round trip is exact.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal as StatNormal};

use crate::seeding::{self, TAG_IDN, TAG_SYMMETRIC, TAG_SYNTH};
use crate::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const IMAGES_FILE: &str = "images.bin";
pub const NOISY_LABELS_FILE: &str = "labels_noisy.bin";
pub const CLEAN_LABELS_FILE: &str = "labels_clean.bin";

/// One image, `H x W x C`, pixel intensities in `[0, 1]` quantised to 8 bits.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<u8>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Param(format!(
                "image dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::Param(format!(
                "image payload has {} values, expected {}",
                data.len(),
                height * width * channels
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    /// Quantises unit-interval intensities. Values outside `[0, 1]` are rejected.
    pub fn from_unit(height: usize, width: usize, channels: usize, values: &[f32]) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Domain(format!("pixel value {v} outside [0, 1]")));
        }
        let data = values.iter().map(|v| (v * 255.0).round() as u8).collect();
        Self::new(height, width, channels, data)
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn raw(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c] as f32 / 255.0
    }

    /// Pixel intensities in `[0, 1]`, HWC order.
    pub fn to_unit(&self) -> Vec<f32> {
        self.data.iter().map(|&q| q as f32 / 255.0).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    None,
    Symmetric,
    Idn,
}

impl std::str::FromStr for NoiseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(NoiseKind::None),
            "symmetric" => Ok(NoiseKind::Symmetric),
            "idn" => Ok(NoiseKind::Idn),
            other => Err(Error::Param(format!("unknown noise kind '{other}'"))),
        }
    }
}

/// Images with observed (noisy) labels and, when known, the clean labels.
///
/// Labels are stored as class indices; `one_hot` gives the vector form.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisyDataset {
    pub images: Vec<ImageTensor>,
    pub noisy_labels: Vec<usize>,
    pub clean_labels: Option<Vec<usize>>,
    pub num_classes: usize,
    pub noise_kind: NoiseKind,
    pub noise_rate: f64,
    pub seed: u64,
}

impl NoisyDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// `(H, W, C)` shared by every image.
    pub fn image_shape(&self) -> Option<(usize, usize, usize)> {
        self.images.first().map(ImageTensor::shape)
    }

    pub fn one_hot(&self, label: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.num_classes];
        v[label] = 1.0;
        v
    }

    pub fn clean_labels(&self) -> Result<&[usize]> {
        self.clean_labels
            .as_deref()
            .ok_or_else(|| Error::State("dataset has no clean labels".into()))
    }

    /// `true` where the observed label differs from the clean one.
    pub fn flip_mask(&self) -> Result<Vec<bool>> {
        let clean = self.clean_labels()?;
        Ok(clean.iter().zip(&self.noisy_labels).map(|(c, n)| c != n).collect())
    }

    pub fn flip_fraction(&self) -> Result<f64> {
        let mask = self.flip_mask()?;
        Ok(mask.iter().filter(|&&f| f).count() as f64 / mask.len().max(1) as f64)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Param("need at least two classes".into()));
        }
        if self.images.len() != self.noisy_labels.len() {
            return Err(Error::Param(format!(
                "{} images but {} labels",
                self.images.len(),
                self.noisy_labels.len()
            )));
        }
        if let Some(shape) = self.image_shape() {
            if self.images.iter().any(|im| im.shape() != shape) {
                return Err(Error::Param("images differ in shape".into()));
            }
        }
        let check = |labels: &[usize]| labels.iter().all(|&l| l < self.num_classes);
        if !check(&self.noisy_labels) {
            return Err(Error::Param("noisy label out of range".into()));
        }
        if let Some(clean) = &self.clean_labels {
            if clean.len() != self.images.len() || !check(clean) {
                return Err(Error::Param("clean labels inconsistent with images".into()));
            }
        }
        Ok(())
    }

    /// Copy of the examples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> NoisyDataset {
        NoisyDataset {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            noisy_labels: indices.iter().map(|&i| self.noisy_labels[i]).collect(),
            clean_labels: self
                .clean_labels
                .as_ref()
                .map(|c| indices.iter().map(|&i| c[i]).collect()),
            num_classes: self.num_classes,
            noise_kind: self.noise_kind,
            noise_rate: self.noise_rate,
            seed: self.seed,
        }
    }

    pub fn manifest(&self) -> DatasetManifest {
        let (height, width, channels) = self.image_shape().unwrap_or((0, 0, 0));
        DatasetManifest {
            num_examples: self.len(),
            height,
            width,
            channels,
            num_classes: self.num_classes,
            noise_kind: self.noise_kind,
            noise_rate: self.noise_rate,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub num_examples: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub num_classes: usize,
    pub noise_kind: NoiseKind,
    pub noise_rate: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy)]
enum Glyph {
    Disc,
    Square,
    Triangle,
    Cross,
}

impl Glyph {
    fn from_index(i: usize) -> Self {
        match i % 4 {
            0 => Glyph::Disc,
            1 => Glyph::Square,
            2 => Glyph::Triangle,
            _ => Glyph::Cross,
        }
    }

    /// Whether offset `(dy, dx)` from the glyph centre lies inside a glyph of radius `r`.
    fn covers(self, dy: f32, dx: f32, r: f32) -> bool {
        match self {
            Glyph::Disc => dx * dx + dy * dy <= r * r,
            Glyph::Square => dx.abs().max(dy.abs()) <= 0.8 * r,
            Glyph::Triangle => dy >= -r && dy <= r && dx.abs() <= 0.5 * (dy + r),
            Glyph::Cross => {
                let arm = r / 3.0;
                (dx.abs() <= arm && dy.abs() <= r) || (dy.abs() <= arm && dx.abs() <= r)
            }
        }
    }
}

/// Procedural stand-in for a small natural-image benchmark.
///
/// Class `c` draws glyph `c % 4` (disc, square, triangle, cross) in slot
/// `c / 4` (the centre when `num_classes <= 4`, otherwise one of the four
/// quadrants). Each image gets its own position jitter, glyph size,
/// foreground and background colours and additive pixel noise. Examples are
/// interleaved by class, so the label sequence is `0, 1, .., K-1, 0, 1, ..`.
pub fn synth_shapes(num_classes: usize, n_per_class: usize, side: usize, seed: u64) -> Result<NoisyDataset> {
    if !(2..=16).contains(&num_classes) {
        return Err(Error::Param(format!(
            "num_classes must be in [2, 16], got {num_classes}"
        )));
    }
    if side < 8 {
        return Err(Error::Param(format!("side must be at least 8, got {side}")));
    }
    if n_per_class == 0 {
        return Err(Error::Param("n_per_class must be positive".into()));
    }

    let channels = 3;
    let s = side as f32;
    let quadrants = num_classes > 4;
    let (base_radius, jitter) = if quadrants {
        (0.17 * s, 0.06 * s)
    } else {
        (0.3 * s, 0.12 * s)
    };
    let pixel_noise = Normal::new(0.0f32, 0.06).expect("valid normal");

    let mut rng = seeding::stream(seed, &[TAG_SYNTH]);
    let n = num_classes * n_per_class;
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n_per_class {
        for class in 0..num_classes {
            let glyph = Glyph::from_index(class);
            let (cy, cx) = if quadrants {
                let slot = class / 4;
                (
                    s * (0.25 + 0.5 * (slot / 2) as f32),
                    s * (0.25 + 0.5 * (slot % 2) as f32),
                )
            } else {
                (0.5 * s, 0.5 * s)
            };
            let cy = cy + rng.random_range(-jitter..=jitter);
            let cx = cx + rng.random_range(-jitter..=jitter);
            let r = base_radius * rng.random_range(0.75f32..1.15);
            let fg: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.45f32..1.0));
            let bg: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.0f32..0.35));

            let mut values = Vec::with_capacity(side * side * channels);
            for y in 0..side {
                for x in 0..side {
                    let inside = glyph.covers(y as f32 + 0.5 - cy, x as f32 + 0.5 - cx, r);
                    for c in 0..channels {
                        let base = if inside { fg[c] } else { bg[c] };
                        let v = base + pixel_noise.sample(&mut rng);
                        values.push(v.clamp(0.0, 1.0));
                    }
                }
            }
            images.push(ImageTensor::from_unit(side, side, channels, &values)?);
            labels.push(class);
        }
    }

    Ok(NoisyDataset {
        images,
        noisy_labels: labels.clone(),
        clean_labels: Some(labels),
        num_classes,
        noise_kind: NoiseKind::None,
        noise_rate: 0.0,
        seed,
    })
}

/// Parameters of the instance-dependent noise generator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IdnParams {
    /// Mean flip probability.
    pub rate: f64,
    /// Standard deviation of the per-instance flip probability before truncation to `[0, 1]`.
    pub rate_std: f64,
}

impl IdnParams {
    pub fn new(rate: f64) -> Self {
        Self { rate, rate_std: 0.1 }
    }
}

fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Param(format!("noise rate must be in [0, 1), got {rate}")));
    }
    Ok(())
}

/// Quantile function of `N(mean, std^2)` truncated to `[0, 1]`.
fn truncated_normal_quantile(u: f64, mean: f64, std: f64) -> f64 {
    let std_normal = StatNormal::new(0.0, 1.0).expect("valid normal");
    let lo = std_normal.cdf((0.0 - mean) / std);
    let hi = std_normal.cdf((1.0 - mean) / std);
    let p = lo + u * (hi - lo);
    (mean + std * std_normal.inverse_cdf(p)).clamp(0.0, 1.0)
}

fn centred_pixels(image: &ImageTensor) -> Vec<f64> {
    image.raw().iter().map(|&q| q as f64 / 255.0 - 0.5).collect()
}

/// Instance-dependent label noise.
///
/// Each example receives a flip probability `q_i` with a truncated normal
/// `N(rate, rate_std^2)` marginal on `[0, 1]`. The probability is tied to the
/// image: within every true class, examples are ranked by a fixed random
/// projection of their pixels and the rank is pushed through the truncated
/// normal quantile function, so the per-class set of `q_i` follows the target
/// distribution while harder-scoring images flip more often. The flip target
/// follows a per-class random projection of the pixels to `K` scores with the
/// true class masked out and a softmax over the rest; the noisy label is drawn
/// from `(1 - q_i) e_y + q_i softmax(...)`.
pub fn inject_idn(ds: &NoisyDataset, rate: f64, seed: u64) -> Result<NoisyDataset> {
    inject_idn_with(ds, IdnParams::new(rate), seed)
}

pub fn inject_idn_with(ds: &NoisyDataset, params: IdnParams, seed: u64) -> Result<NoisyDataset> {
    check_rate(params.rate)?;
    if params.rate_std <= 0.0 {
        return Err(Error::Param("rate_std must be positive".into()));
    }
    let clean = ds.clean_labels()?.to_vec();
    let k = ds.num_classes;
    let mut out = ds.clone();
    out.noise_kind = NoiseKind::Idn;
    out.noise_rate = params.rate;
    out.seed = seed;
    out.noisy_labels = clean.clone();
    if params.rate == 0.0 || ds.is_empty() {
        return Ok(out);
    }

    let dim = ds.images[0].len();
    let mut rng = seeding::stream(seed, &[TAG_IDN]);
    // Per true class: a difficulty direction (dim) and a flip-target projection (dim x K).
    let difficulty: Vec<Vec<f64>> = (0..k)
        .map(|_| (0..dim).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    let target_proj: Vec<Vec<f64>> = (0..k)
        .map(|_| (0..dim * k).map(|_| rng.sample(StandardNormal)).collect())
        .collect();

    let pixels: Vec<Vec<f64>> = ds.images.iter().map(centred_pixels).collect();
    let mut flip_prob = vec![0.0; ds.len()];
    for class in 0..k {
        let members: Vec<usize> = (0..ds.len()).filter(|&i| clean[i] == class).collect();
        let mut scored: Vec<(f64, usize)> = members
            .iter()
            .map(|&i| {
                let s = pixels[i]
                    .iter()
                    .zip(&difficulty[class])
                    .map(|(a, b)| a * b)
                    .sum::<f64>();
                (s, i)
            })
            .collect();
        scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let m = scored.len() as f64;
        for (rank, &(_, i)) in scored.iter().enumerate() {
            let u = (rank as f64 + 0.5) / m;
            flip_prob[i] = truncated_normal_quantile(u, params.rate, params.rate_std);
        }
    }

    for i in 0..ds.len() {
        let y = clean[i];
        let proj = &target_proj[y];
        let mut scores = vec![f64::NEG_INFINITY; k];
        for (j, score) in scores.iter_mut().enumerate() {
            if j != y {
                *score = pixels[i].iter().enumerate().map(|(d, p)| p * proj[d * k + j]).sum();
            }
        }
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exp: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let z: f64 = exp.iter().sum();
        let q = flip_prob[i];
        let probs: Vec<f64> = (0..k).map(|j| if j == y { 1.0 - q } else { q * exp[j] / z }).collect();
        out.noisy_labels[i] = sample_index(&probs, rng.random::<f64>());
    }
    Ok(out)
}

fn sample_index(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (j, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return j;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Flips each label independently with probability `rate` to a uniformly
/// chosen different class.
pub fn inject_symmetric(ds: &NoisyDataset, rate: f64, seed: u64) -> Result<NoisyDataset> {
    check_rate(rate)?;
    let clean = ds.clean_labels()?.to_vec();
    let k = ds.num_classes;
    let mut rng = seeding::stream(seed, &[TAG_SYMMETRIC]);
    let mut out = ds.clone();
    out.noise_kind = NoiseKind::Symmetric;
    out.noise_rate = rate;
    out.seed = seed;
    out.noisy_labels = clean
        .iter()
        .map(|&y| {
            let flip = rng.random::<f64>() < rate;
            let other = rng.random_range(0..k - 1);
            if flip {
                if other >= y {
                    other + 1
                } else {
                    other
                }
            } else {
                y
            }
        })
        .collect();
    Ok(out)
}

fn write_labels(path: &Path, labels: &[usize]) -> Result<()> {
    let mut bytes = Vec::with_capacity(labels.len() * 2);
    for &l in labels {
        let l = u16::try_from(l).map_err(|_| Error::Format(format!("label {l} exceeds u16")))?;
        bytes.extend_from_slice(&l.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_labels(path: &Path, expected: usize, num_classes: usize) -> Result<Vec<usize>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != expected * 2 {
        return Err(Error::Format(format!(
            "{} holds {} bytes, manifest implies {}",
            path.display(),
            bytes.len(),
            expected * 2
        )));
    }
    let labels: Vec<usize> = bytes
        .chunks_exact(2)
        .map(|b| u16::from_le_bytes([b[0], b[1]]) as usize)
        .collect();
    if let Some(l) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::Format(format!(
            "{}: label {l} out of range for {num_classes} classes",
            path.display()
        )));
    }
    Ok(labels)
}

pub fn save_dataset(ds: &NoisyDataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    ds.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = serde_json::to_string_pretty(&ds.manifest())?;
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;

    let mut pixels = Vec::with_capacity(ds.len() * ds.images.first().map_or(0, |i| i.len()));
    for im in &ds.images {
        pixels.extend_from_slice(im.raw());
    }
    let path = dir.join(IMAGES_FILE);
    fs::write(&path, pixels).map_err(|e| Error::io(&path, e))?;
    write_labels(&dir.join(NOISY_LABELS_FILE), &ds.noisy_labels)?;
    let clean_path = dir.join(CLEAN_LABELS_FILE);
    match &ds.clean_labels {
        Some(clean) => write_labels(&clean_path, clean)?,
        None if clean_path.exists() => fs::remove_file(&clean_path).map_err(|e| Error::io(&clean_path, e))?,
        None => {}
    }
    Ok(())
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<NoisyDataset> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if m.height == 0 || m.width == 0 || m.channels == 0 || m.num_classes < 2 {
        return Err(Error::Format("manifest has non-positive dimensions".into()));
    }
    if !(0.0..=1.0).contains(&m.noise_rate) {
        return Err(Error::Format(format!("noise_rate {} outside [0, 1]", m.noise_rate)));
    }

    let path = dir.join(IMAGES_FILE);
    let pixels = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let per_image = m.height * m.width * m.channels;
    if pixels.len() != m.num_examples * per_image {
        return Err(Error::Format(format!(
            "{} holds {} bytes, manifest implies {}",
            path.display(),
            pixels.len(),
            m.num_examples * per_image
        )));
    }
    let images = pixels
        .chunks_exact(per_image)
        .map(|chunk| ImageTensor::new(m.height, m.width, m.channels, chunk.to_vec()))
        .collect::<Result<Vec<_>>>()?;
    let noisy_labels = read_labels(&dir.join(NOISY_LABELS_FILE), m.num_examples, m.num_classes)?;
    let clean_path = dir.join(CLEAN_LABELS_FILE);
    let clean_labels = if clean_path.exists() {
        Some(read_labels(&clean_path, m.num_examples, m.num_classes)?)
    } else {
        None
    };

    Ok(NoisyDataset {
        images,
        noisy_labels,
        clean_labels,
        num_classes: m.num_classes,
        noise_kind: m.noise_kind,
        noise_rate: m.noise_rate,
        seed: m.seed,
    })
}
