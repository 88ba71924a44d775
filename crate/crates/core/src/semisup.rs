//! MixMatch-style semi-supervised loss over a labelled/unlabelled split:
//! label co-refinement, co-guessing, sharpening, mixup and the combined
//! loss `L_x + λ_u·L_u + λ_r·L_reg`.

use candle_core::{Tensor, D};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};

use crate::distributions::CAT_EPS;
use crate::networks::PeerNet;
use crate::seeding;
use crate::{Error, Result};

fn check_temperature(t: f64) -> Result<()> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(Error::Param(format!("temperature must be positive, got {t}")));
    }
    Ok(())
}

fn check_simplex(p: &[f64]) -> Result<()> {
    let sum: f64 = p.iter().sum();
    if p.iter().any(|&v| !(v >= 0.0)) || (sum - 1.0).abs() > 1e-6 {
        return Err(Error::Param("not a probability vector".into()));
    }
    Ok(())
}

/// `p_k^{1/T} / Σ_j p_j^{1/T}`.
pub fn sharpen(p: &[f64], t: f64) -> Result<Vec<f64>> {
    check_temperature(t)?;
    check_simplex(p)?;
    let powed: Vec<f64> = p.iter().map(|v| v.powf(1.0 / t)).collect();
    let z: f64 = powed.iter().sum();
    Ok(powed.iter().map(|v| v / z).collect())
}

/// Row-wise [`sharpen`] on a `(B, K)` tensor.
pub fn sharpen_t(p: &Tensor, t: f64) -> Result<Tensor> {
    check_temperature(t)?;
    let powed = p.powf(1.0 / t)?;
    Ok(powed.broadcast_div(&powed.sum_keepdim(D::Minus1)?)?)
}

/// `sharpen(w·y + (1−w)·p_avg, T)`.
pub fn co_refine(y: &[f64], w: f64, p_avg: &[f64], t: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::Param(format!("w must be in [0, 1], got {w}")));
    }
    if y.len() != p_avg.len() {
        return Err(Error::Param("label and prediction lengths differ".into()));
    }
    check_simplex(y)?;
    check_simplex(p_avg)?;
    let mixed: Vec<f64> = y.iter().zip(p_avg).map(|(a, b)| w * a + (1.0 - w) * b).collect();
    sharpen(&mixed, t)
}

/// Tensor form: `y`, `p_avg` are `(B, K)`, `w` is `(B,)`.
pub fn co_refine_t(y: &Tensor, w: &Tensor, p_avg: &Tensor, t: f64) -> Result<Tensor> {
    let w = w.unsqueeze(1)?;
    let mixed = (y.broadcast_mul(&w)? + p_avg.broadcast_mul(&w.affine(-1.0, 1.0)?)?)?;
    sharpen_t(&mixed, t)
}

/// Mean classifier probability over every (net, view) pair, detached.
pub fn average_prediction(views: &[Tensor], nets: &[&PeerNet]) -> Result<Tensor> {
    if views.is_empty() || nets.is_empty() {
        return Err(Error::Param("need at least one view and one net".into()));
    }
    let mut acc: Option<Tensor> = None;
    for net in nets {
        for v in views {
            let p = net.classifier_probs(v)?.detach();
            acc = Some(match acc {
                Some(a) => (a + p)?,
                None => p,
            });
        }
    }
    let n = (views.len() * nets.len()) as f64;
    Ok((acc.expect("non-empty") / n)?)
}

/// Guessed targets for unlabelled data: both nets' predictions averaged over
/// the augmented `views`, then sharpened.
pub fn co_guess(views: &[Tensor], net1: &PeerNet, net2: &PeerNet, t: f64) -> Result<Tensor> {
    sharpen_t(&average_prediction(views, &[net1, net2])?, t)
}

/// Draws `λ ~ Beta(α, α)` and returns `max(λ, 1−λ)`.
pub fn sample_lam_prime<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> Result<f64> {
    let beta = Beta::new(alpha, alpha).map_err(|e| Error::Param(format!("alpha={alpha}: {e}")))?;
    let lam: f64 = beta.sample(rng);
    Ok(lam.max(1.0 - lam))
}

/// One mixed example.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedPair {
    pub x: Vec<f64>,
    pub t: Vec<f64>,
    pub lam_prime: f64,
}

/// Mixes two examples with `λ' = max(λ, 1−λ)`, `λ ~ Beta(α, α)` drawn from `seed`.
pub fn mixup_pair(x_a: &[f64], t_a: &[f64], x_b: &[f64], t_b: &[f64], alpha: f64, seed: u64) -> Result<MixedPair> {
    if !(alpha > 0.0) {
        return Err(Error::Param(format!("alpha must be positive, got {alpha}")));
    }
    if x_a.len() != x_b.len() || t_a.len() != t_b.len() {
        return Err(Error::Param("mixup operands differ in length".into()));
    }
    let mut rng = seeding::stream(seed, &[]);
    let lp = sample_lam_prime(alpha, &mut rng)?;
    Ok(mix_with(x_a, t_a, x_b, t_b, lp))
}

/// Mixes two examples with a given `λ'`.
pub fn mix_with(x_a: &[f64], t_a: &[f64], x_b: &[f64], t_b: &[f64], lam_prime: f64) -> MixedPair {
    let lerp = |a: &[f64], b: &[f64]| -> Vec<f64> {
        a.iter()
            .zip(b)
            .map(|(u, v)| lam_prime * u + (1.0 - lam_prime) * v)
            .collect()
    };
    MixedPair {
        x: lerp(x_a, x_b),
        t: lerp(t_a, t_b),
        lam_prime,
    }
}

/// Inputs and soft targets after batch mixup. The first `n_labelled` rows
/// come from labelled data.
#[derive(Debug, Clone)]
pub struct MixBatch {
    pub inputs: Tensor,
    pub targets: Tensor,
    pub n_labelled: usize,
    pub lam_prime: f64,
}

/// `λ'·x + (1−λ')·x[perm]` for inputs and targets alike.
pub fn mixup_batch(x: &Tensor, t: &Tensor, lam_prime: f64, perm: &[usize]) -> Result<(Tensor, Tensor)> {
    let n = x.dim(0)?;
    if perm.len() != n || t.dim(0)? != n {
        return Err(Error::Param("permutation length does not match batch".into()));
    }
    let idx = Tensor::from_vec(perm.iter().map(|&i| i as u32).collect::<Vec<_>>(), n, x.device())?;
    let mix = |a: &Tensor| -> Result<Tensor> {
        let b = a.index_select(&idx, 0)?;
        Ok(((a * lam_prime)? + (b * (1.0 - lam_prime))?)?)
    };
    Ok((mix(x)?, mix(t)?))
}

/// Hyperparameters of the semi-supervised loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DmParams {
    pub t_sharpen: f64,
    pub alpha: f64,
    pub lambda_u: f64,
    pub lambda_r: f64,
    pub rampup: f64,
}

impl Default for DmParams {
    fn default() -> Self {
        Self {
            t_sharpen: 0.5,
            alpha: 4.0,
            lambda_u: 25.0,
            lambda_r: 1.0,
            rampup: 16.0,
        }
    }
}

/// `λ_u·clamp(progress / rampup, 0, 1)`; progress is measured in epochs
/// since the end of warmup and may be fractional.
pub fn lambda_u_at(progress: f64, lambda_u: f64, rampup: f64) -> f64 {
    if rampup <= 0.0 {
        return lambda_u;
    }
    lambda_u * (progress / rampup).clamp(0.0, 1.0)
}

/// Builds the mixed batch for model `net` with peer `peer`.
///
/// `labelled_views` and `unlabelled_views` are augmented copies of the same
/// labelled / unlabelled examples; `y` holds one-hot noisy labels and `w`
/// the clean probabilities of the labelled examples. Targets are detached.
#[allow(clippy::too_many_arguments)]
pub fn build_mix_batch(
    net: &PeerNet,
    peer: &PeerNet,
    labelled_views: &[Tensor],
    y: &Tensor,
    w: &Tensor,
    unlabelled_views: &[Tensor],
    t_sharpen: f64,
    lam_prime: f64,
    perm: &[usize],
) -> Result<MixBatch> {
    if labelled_views.is_empty() || labelled_views[0].dim(0)? == 0 {
        return Err(Error::Training("labelled batch is empty".into()));
    }
    let p_avg = average_prediction(labelled_views, &[net])?;
    let t_x = co_refine_t(y, w, &p_avg, t_sharpen)?.detach();
    let mut inputs: Vec<Tensor> = labelled_views.to_vec();
    let mut targets: Vec<Tensor> = vec![t_x; labelled_views.len()];
    let has_u = !unlabelled_views.is_empty() && unlabelled_views[0].dim(0)? > 0;
    if has_u {
        let t_u = co_guess(unlabelled_views, net, peer, t_sharpen)?.detach();
        inputs.extend(unlabelled_views.iter().cloned());
        targets.extend(std::iter::repeat_n(t_u, unlabelled_views.len()));
    }
    let n_labelled = labelled_views
        .iter()
        .map(|v| v.dim(0))
        .sum::<candle_core::Result<usize>>()?;
    let x = Tensor::cat(&inputs, 0)?;
    let t = Tensor::cat(&targets, 0)?;
    let (inputs, targets) = mixup_batch(&x, &t, lam_prime, perm)?;
    Ok(MixBatch {
        inputs,
        targets,
        n_labelled,
        lam_prime,
    })
}

/// Random permutation of `0..n`.
pub fn random_perm(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

/// The three parts of the loss and their weighted sum, all scalar tensors.
#[derive(Debug, Clone)]
pub struct DmTerms {
    pub l_x: Tensor,
    pub l_u: Tensor,
    pub l_reg: Tensor,
    pub total: Tensor,
}

/// `L_x + λ_u·L_u + λ_r·L_reg` on a mixed batch.
///
/// `L_x` is the soft-target cross-entropy over the labelled rows, `L_u` the
/// mean squared error between probabilities and targets over the unlabelled
/// rows (zero when there are none) and `L_reg = Σ_k π_k log(π_k / p̄_k)` with
/// uniform `π` and `p̄` the mean prediction over the whole mixed batch,
/// floored at [`CAT_EPS`].
pub fn dividemix_loss(net: &PeerNet, batch: &MixBatch, lambda_u: f64, lambda_r: f64) -> Result<DmTerms> {
    if batch.n_labelled == 0 {
        return Err(Error::Training("labelled set is empty; lower tau".into()));
    }
    let logits = net.classifier_logits(&batch.inputs)?;
    let n = logits.dim(0)?;
    let k = logits.dim(1)?;
    let log_p = candle_nn::ops::log_softmax(&logits, D::Minus1)?;
    let probs = log_p.exp()?;
    let nl = batch.n_labelled;
    let l_x = (log_p.narrow(0, 0, nl)? * batch.targets.narrow(0, 0, nl)?)?
        .sum(D::Minus1)?
        .mean_all()?
        .neg()?;
    let l_u = if n > nl {
        (probs.narrow(0, nl, n - nl)? - batch.targets.narrow(0, nl, n - nl)?)?
            .sqr()?
            .mean_all()?
    } else {
        l_x.zeros_like()?
    };
    // floored so a class the batch never predicts costs a finite penalty
    let p_bar = probs.mean(0)?.clamp(CAT_EPS, 1.0)?;
    let prior = 1.0 / k as f64;
    // Σ π log π − Σ π log p̄
    let l_reg = ((p_bar.log()?.sum_all()? * (-prior))? + prior.ln())?;
    let total = ((&l_x + (&l_u * lambda_u)?)? + (&l_reg * lambda_r)?)?;
    Ok(DmTerms { l_x, l_u, l_reg, total })
}

/// Random horizontal flip plus a shift of up to `max_shift` pixels in each
/// direction with zero fill, applied independently to every image of an
/// NHWC pixel buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Augmenter {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub max_shift: usize,
}

impl Augmenter {
    pub fn new(shape: (usize, usize, usize), max_shift: usize) -> Self {
        Self {
            height: shape.0,
            width: shape.1,
            channels: shape.2,
            max_shift,
        }
    }

    /// Applies one fixed transform to a single HWC image.
    pub fn transform(&self, src: &[f32], flip: bool, dy: isize, dx: isize, dst: &mut [f32]) {
        let (h, w, c) = (self.height as isize, self.width as isize, self.channels);
        for y in 0..h {
            for x in 0..w {
                let sy = y + dy;
                let sx0 = x + dx;
                let sx = if flip { w - 1 - sx0 } else { sx0 };
                let out = ((y * w + x) as usize) * c;
                if sy < 0 || sy >= h || sx0 < 0 || sx0 >= w {
                    dst[out..out + c].fill(0.0);
                } else {
                    let inp = ((sy * w + sx) as usize) * c;
                    dst[out..out + c].copy_from_slice(&src[inp..inp + c]);
                }
            }
        }
    }

    /// Independently augmented copy of a batch.
    pub fn augment(&self, batch: &[f32], rng: &mut ChaCha8Rng) -> Vec<f32> {
        let per = self.height * self.width * self.channels;
        let s = self.max_shift as i64;
        let mut out = vec![0f32; batch.len()];
        for (src, dst) in batch.chunks(per).zip(out.chunks_mut(per)) {
            let flip = rng.random_bool(0.5);
            let dy = rng.random_range(-s..=s) as isize;
            let dx = rng.random_range(-s..=s) as isize;
            self.transform(src, flip, dy, dx, dst);
        }
        out
    }
}
