//! The four function approximators of a peer model.
//!
//! All tensors are NHWC. Labels enter the encoder and the noisy-label head
//! as `K` constant extra image channels and enter the decoder concatenated
//! to the latent vector.

mod kernels;
mod layers;

use std::path::Path;

use candle_core::{DType, Device, Tensor, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub use kernels::{col2im, im2col, Col2Im, ConvGeometry, Im2Col};
pub use layers::{Conv2d, ConvTranspose2d, Linear, ParamStore};

use crate::datasets::ImageTensor;
use crate::distributions::{DiagGaussian, CB_EPS};
use crate::seeding::{self, TAG_INIT};
use crate::{Error, Result};
use layers::Init;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backbone {
    /// Two strided convolutions and a linear layer.
    Small,
    /// Four strided convolutions (32, 64, 128, 256) and a linear layer.
    Paper,
}

impl Backbone {
    fn classifier_widths(self) -> &'static [usize] {
        match self {
            Backbone::Small => &[16, 32],
            Backbone::Paper => &[32, 64, 128, 256],
        }
    }
}

/// Shapes and sizes of a peer model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub num_classes: usize,
    pub latent_dim: usize,
    pub backbone: Backbone,
    /// First encoder width; the encoder uses `w, 2w, 4w, 8w` and the decoder mirrors it.
    pub gen_width: usize,
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.channels == 0 {
            return Err(Error::Config("image dimensions must be positive".into()));
        }
        if !self.height.is_multiple_of(8) || !self.width.is_multiple_of(8) {
            return Err(Error::Config(format!(
                "decoder needs height and width divisible by 8, got {}x{}",
                self.height, self.width
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        if self.latent_dim == 0 || self.gen_width == 0 {
            return Err(Error::Config("latent_dim and gen_width must be positive".into()));
        }
        Ok(())
    }

    pub fn image_shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }
}

fn halve(n: usize) -> usize {
    n.div_ceil(2)
}

/// Maps pixels from `[0, 1]` to `[-1, 1]` before the first convolution.
fn centre(x: &Tensor) -> Result<Tensor> {
    Ok(x.affine(2.0, -1.0)?)
}

/// Strided conv stack followed by a linear read-out.
#[derive(Debug, Clone)]
struct ConvHead {
    convs: Vec<Conv2d>,
    out: Linear,
}

impl ConvHead {
    fn new(
        init: &mut Init,
        name: &str,
        arch: &ArchConfig,
        in_channels: usize,
        widths: &[usize],
        outputs: usize,
    ) -> Result<Self> {
        let (mut h, mut w, mut c) = (arch.height, arch.width, in_channels);
        let mut convs = Vec::with_capacity(widths.len());
        for (i, &width) in widths.iter().enumerate() {
            convs.push(Conv2d::new(init, &format!("{name}.conv{i}"), c, width, 3, 2, 1)?);
            h = halve(h);
            w = halve(w);
            c = width;
        }
        let out = Linear::new(init, &format!("{name}.out"), h * w * c, outputs)?;
        Ok(Self { convs, out })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for conv in &self.convs {
            h = conv.forward(&h)?.silu()?;
        }
        let b = h.dim(0)?;
        self.out.forward(&h.reshape((b, ()))?)
    }
}

#[derive(Debug, Clone)]
struct Decoder {
    input: Linear,
    seed_h: usize,
    seed_w: usize,
    seed_c: usize,
    ups: Vec<ConvTranspose2d>,
    to_pixels: Conv2d,
}

impl Decoder {
    fn new(init: &mut Init, arch: &ArchConfig) -> Result<Self> {
        let w = arch.gen_width;
        let widths = [8 * w, 4 * w, 2 * w, w];
        let (seed_h, seed_w) = (arch.height / 8, arch.width / 8);
        let input = Linear::hidden(
            init,
            "decoder.input",
            arch.latent_dim + arch.num_classes,
            seed_h * seed_w * widths[0],
        )?;
        let ups = widths
            .windows(2)
            .enumerate()
            .map(|(i, pair)| ConvTranspose2d::new(init, &format!("decoder.up{i}"), pair[0], pair[1], 4, 2, 1))
            .collect::<Result<Vec<_>>>()?;
        let to_pixels = Conv2d::new(init, "decoder.to_pixels", w, arch.channels, 3, 1, 1)?;
        Ok(Self {
            input,
            seed_h,
            seed_w,
            seed_c: widths[0],
            ups,
            to_pixels,
        })
    }

    fn forward(&self, zy: &Tensor) -> Result<Tensor> {
        let b = zy.dim(0)?;
        let mut h = self
            .input
            .forward(zy)?
            .silu()?
            .reshape((b, self.seed_h, self.seed_w, self.seed_c))?;
        for up in &self.ups {
            h = up.forward(&h)?.silu()?;
        }
        let logits = self.to_pixels.forward(&h)?;
        Ok(candle_nn::ops::sigmoid(&logits)?.clamp(CB_EPS, 1.0 - CB_EPS)?)
    }
}

/// One peer model: clean-label classifier `q(Y|X)`, encoder `q(Z|X,Y)`,
/// decoder `p(X|Z,Y)` and noisy-label head `p(Ŷ|X,Y)`.
#[derive(Debug, Clone)]
pub struct PeerNet {
    arch: ArchConfig,
    seed: u64,
    classifier: ConvHead,
    encoder: ConvHead,
    decoder: Decoder,
    noisy_head: ConvHead,
    params: ParamStore,
    dtype: DType,
    device: Device,
}

pub const CLASSIFIER_PREFIX: &str = "classifier.";

impl PeerNet {
    /// Single-precision peer, initialised from `seed`.
    pub fn build(arch: &ArchConfig, seed: u64) -> Result<Self> {
        Self::build_with_dtype(arch, seed, DType::F32)
    }

    pub fn build_with_dtype(arch: &ArchConfig, seed: u64, dtype: DType) -> Result<Self> {
        arch.validate()?;
        if !matches!(dtype, DType::F32 | DType::F64) {
            return Err(Error::Config(format!("unsupported dtype {dtype:?}")));
        }
        let device = Device::Cpu;
        let mut rng: ChaCha8Rng = seeding::stream(seed, &[TAG_INIT]);
        let mut params = ParamStore::default();
        let mut init = Init {
            rng: &mut rng,
            dtype,
            device: &device,
            store: &mut params,
        };
        let k = arch.num_classes;
        let c = arch.channels;
        let w = arch.gen_width;
        let cls_widths = arch.backbone.classifier_widths();
        let classifier = ConvHead::new(&mut init, "classifier", arch, c, cls_widths, k)?;
        let encoder = ConvHead::new(
            &mut init,
            "encoder",
            arch,
            c + k,
            &[w, 2 * w, 4 * w, 8 * w],
            2 * arch.latent_dim,
        )?;
        let decoder = Decoder::new(&mut init, arch)?;
        let noisy_head = ConvHead::new(&mut init, "noisy_head", arch, c + k, cls_widths, k)?;
        Ok(Self {
            arch: arch.clone(),
            seed,
            classifier,
            encoder,
            decoder,
            noisy_head,
            params,
            dtype,
            device,
        })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Whether a named parameter belongs to the clean-label classifier.
    pub fn is_discriminative(name: &str) -> bool {
        name.starts_with(CLASSIFIER_PREFIX)
    }

    fn check_images(&self, x: &Tensor) -> Result<usize> {
        let (b, h, w, c) = x.dims4()?;
        if (h, w, c) != self.arch.image_shape() {
            return Err(Error::Param(format!(
                "image batch is {h}x{w}x{c}, model expects {:?}",
                self.arch.image_shape()
            )));
        }
        Ok(b)
    }

    fn check_labels(&self, y: &Tensor, b: usize) -> Result<()> {
        let (by, k) = y.dims2()?;
        if by != b || k != self.arch.num_classes {
            return Err(Error::Param(format!(
                "label batch is {by}x{k}, expected {b}x{}",
                self.arch.num_classes
            )));
        }
        Ok(())
    }

    fn with_label_channels(&self, x: &Tensor, y: &Tensor) -> Result<Tensor> {
        let (b, h, w, _) = x.dims4()?;
        let k = self.arch.num_classes;
        let planes = y.reshape((b, 1, 1, k))?.broadcast_as((b, h, w, k))?;
        Ok(Tensor::cat(&[&centre(x)?, &planes], 3)?)
    }

    /// Clean-label classifier logits, `(B, H, W, C)` -> `(B, K)`.
    pub fn classifier_logits(&self, x: &Tensor) -> Result<Tensor> {
        self.check_images(x)?;
        self.classifier.forward(&centre(x)?)
    }

    /// `ρ(x)`, rows on the simplex.
    pub fn classifier_probs(&self, x: &Tensor) -> Result<Tensor> {
        Ok(candle_nn::ops::softmax(&self.classifier_logits(x)?, D::Minus1)?)
    }

    /// Mean and log-variance of `q(Z | x, y)`, each `(B, d_z)`.
    pub fn encode(&self, x: &Tensor, y: &Tensor) -> Result<(Tensor, Tensor)> {
        let b = self.check_images(x)?;
        self.check_labels(y, b)?;
        let out = self.encoder.forward(&self.with_label_channels(x, y)?)?;
        let d = self.arch.latent_dim;
        Ok((out.narrow(1, 0, d)?, out.narrow(1, d, d)?))
    }

    /// Continuous Bernoulli parameters `λ(z, y)`, `(B, H, W, C)`, clamped to `[ε, 1-ε]`.
    pub fn decode(&self, z: &Tensor, y: &Tensor) -> Result<Tensor> {
        let (b, d) = z.dims2()?;
        if d != self.arch.latent_dim {
            return Err(Error::Param(format!(
                "latent has {d} dims, expected {}",
                self.arch.latent_dim
            )));
        }
        self.check_labels(y, b)?;
        self.decoder.forward(&Tensor::cat(&[z, y], 1)?)
    }

    /// `γ(x, y)`, the noisy-label distribution, `(B, K)`.
    pub fn noisy_head_probs(&self, x: &Tensor, y: &Tensor) -> Result<Tensor> {
        let b = self.check_images(x)?;
        self.check_labels(y, b)?;
        let logits = self.noisy_head.forward(&self.with_label_channels(x, y)?)?;
        Ok(candle_nn::ops::softmax(&logits, D::Minus1)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        candle_core::safetensors::save(&self.params.to_tensors(), path)?;
        Ok(())
    }

    pub fn load(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::io(path, std::io::Error::from(std::io::ErrorKind::NotFound)));
        }
        let tensors = candle_core::safetensors::load(path, &self.device)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        self.params.load_tensors(&tensors)
    }

    /// Copies all parameter values from `other` (same architecture).
    pub fn copy_from(&self, other: &PeerNet) -> Result<()> {
        self.params.load_tensors(&other.params.to_tensors())
    }
}

/// Anything that maps images to class probabilities.
pub trait Classifier {
    fn num_classes(&self) -> usize;

    fn predict_proba(&self, images: &[&ImageTensor]) -> Result<Vec<Vec<f64>>>;
}

impl<T: Classifier + ?Sized> Classifier for &T {
    fn num_classes(&self) -> usize {
        (**self).num_classes()
    }

    fn predict_proba(&self, images: &[&ImageTensor]) -> Result<Vec<Vec<f64>>> {
        (**self).predict_proba(images)
    }
}

const PREDICT_CHUNK: usize = 256;

fn probs_to_rows(t: &Tensor) -> Result<Vec<Vec<f64>>> {
    Ok(t.to_dtype(DType::F64)?.to_vec2()?)
}

impl Classifier for PeerNet {
    fn num_classes(&self) -> usize {
        self.arch.num_classes
    }

    fn predict_proba(&self, images: &[&ImageTensor]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(PREDICT_CHUNK) {
            let x = images_to_tensor(chunk, self.dtype, &self.device)?;
            out.extend(probs_to_rows(&self.classifier_probs(&x)?)?);
        }
        Ok(out)
    }
}

/// Average of several classifiers' probabilities.
pub struct Ensemble<'a> {
    members: Vec<&'a PeerNet>,
}

impl<'a> Ensemble<'a> {
    pub fn new(members: Vec<&'a PeerNet>) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::Param("empty ensemble".into()));
        }
        Ok(Self { members })
    }
}

impl Classifier for Ensemble<'_> {
    fn num_classes(&self) -> usize {
        self.members[0].num_classes()
    }

    fn predict_proba(&self, images: &[&ImageTensor]) -> Result<Vec<Vec<f64>>> {
        let mut acc = self.members[0].predict_proba(images)?;
        for m in &self.members[1..] {
            for (row, other) in acc.iter_mut().zip(m.predict_proba(images)?) {
                row.iter_mut().zip(other).for_each(|(a, b)| *a += b);
            }
        }
        let n = self.members.len() as f64;
        acc.iter_mut().flatten().for_each(|v| *v /= n);
        Ok(acc)
    }
}

/// Stacks images into a `(B, H, W, C)` tensor.
pub fn images_to_tensor(images: &[&ImageTensor], dtype: DType, device: &Device) -> Result<Tensor> {
    let (h, w, c) = images
        .first()
        .map(|im| im.shape())
        .ok_or_else(|| Error::Param("empty image batch".into()))?;
    let mut buf = Vec::with_capacity(images.len() * h * w * c);
    for im in images {
        if im.shape() != (h, w, c) {
            return Err(Error::Param("images differ in shape".into()));
        }
        buf.extend(im.raw().iter().map(|&q| q as f32 / 255.0));
    }
    pixels_to_tensor(buf, images.len(), (h, w, c), dtype, device)
}

/// Wraps an HWC pixel buffer for `batch` images.
pub fn pixels_to_tensor(
    buf: Vec<f32>,
    batch: usize,
    shape: (usize, usize, usize),
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let (h, w, c) = shape;
    Ok(Tensor::from_vec(buf, (batch, h, w, c), device)?.to_dtype(dtype)?)
}

pub fn one_hot_tensor(labels: &[usize], k: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let mut buf = vec![0f32; labels.len() * k];
    for (i, &l) in labels.iter().enumerate() {
        if l >= k {
            return Err(Error::Param(format!("label {l} out of range for {k} classes")));
        }
        buf[i * k + l] = 1.0;
    }
    Ok(Tensor::from_vec(buf, (labels.len(), k), device)?.to_dtype(dtype)?)
}

/// Draws `z = μ + σ ⊙ ε` with `ε ~ N(0, I)` from the stream keyed by `noise_seed`.
pub fn reparam_sample(g: &DiagGaussian, noise_seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    g.mu.iter()
        .zip(&g.var)
        .map(|(m, v)| {
            let eps: f64 = StandardNormal.sample(&mut rng);
            m + v.sqrt() * eps
        })
        .collect()
}

/// Tensor form with externally drawn noise: `z = μ + exp(½ logvar) ⊙ ε`.
pub fn reparam_sample_t(mu: &Tensor, logvar: &Tensor, eps: &Tensor) -> Result<Tensor> {
    Ok((mu + (logvar * 0.5)?.exp()?.mul(eps)?)?)
}

/// Standard normal noise of the given shape.
pub fn standard_normal(shape: (usize, usize), rng: &mut ChaCha8Rng, dtype: DType, device: &Device) -> Result<Tensor> {
    let n = shape.0 * shape.1;
    let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Ok(Tensor::from_vec(v, shape, device)?.to_dtype(dtype)?)
}
