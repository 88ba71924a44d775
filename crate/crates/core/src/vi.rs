//! Variational free energy of the generative model and the combined
//! training objective.
//!
//! For an image `x` with observed label `ŷ` the free energy is
//!
//! ```text
//! −log p(x | z, y) − log p(ŷ | x, y) + KL[q(Y|x) ‖ U(K)] + KL[q(Z|x,y) ‖ N(0, I)]
//! ```
//!
//! with `y` the classifier's probability vector (or its argmax in hard
//! mode) and a single reparameterised sample `z`. All four terms enter with
//! unit weight.

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::datasets::ImageTensor;
use crate::distributions::{
    categorical_nll_t, cb_log_prob_t, kl_cat_uniform_t, kl_diag_gauss_stdnormal_t, CategoricalParam,
};
use crate::networks::{images_to_tensor, one_hot_tensor, reparam_sample_t, standard_normal, PeerNet};
use crate::seeding;
use crate::{Error, Result};

/// Image reconstruction term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Recon {
    /// Negative continuous Bernoulli log-likelihood.
    ContinuousBernoulli,
    /// Sum of squared errors between pixels and decoder output.
    Mse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ViOptions {
    pub recon: Recon,
    /// Feed `onehot(argmax ρ)` instead of `ρ`, with no gradient.
    pub hard_labels: bool,
}

impl Default for ViOptions {
    fn default() -> Self {
        Self {
            recon: Recon::ContinuousBernoulli,
            hard_labels: false,
        }
    }
}

/// Label fed to the generative networks: `ρ` itself, or in hard mode the
/// one-hot of its argmax (ties go to the lowest index).
pub fn relaxed_label(c: &CategoricalParam, hard: bool) -> Vec<f64> {
    let rho = c.probs();
    if !hard {
        return rho.to_vec();
    }
    let mut out = vec![0.0; rho.len()];
    out[argmax(rho)] = 1.0;
    out
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) },
        )
        .0
}

/// Tensor form of [`relaxed_label`] on `(B, K)` probabilities.
pub fn relaxed_label_t(probs: &Tensor, hard: bool) -> Result<Tensor> {
    if !hard {
        return Ok(probs.clone());
    }
    let k = probs.dim(1)?;
    let rows: Vec<Vec<f64>> = probs.to_dtype(DType::F64)?.to_vec2()?;
    let idx: Vec<usize> = rows.iter().map(|r| argmax(r)).collect();
    one_hot_tensor(&idx, k, probs.dtype(), probs.device())
}

/// The four free-energy terms of one example and their sum.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ViTerms {
    pub recon_nll: f64,
    pub noisy_nll: f64,
    pub kl_y: f64,
    pub kl_z: f64,
    pub total: f64,
}

impl ViTerms {
    pub fn from_parts(recon_nll: f64, noisy_nll: f64, kl_y: f64, kl_z: f64) -> Self {
        Self {
            recon_nll,
            noisy_nll,
            kl_y,
            kl_z,
            total: recon_nll + noisy_nll + kl_y + kl_z,
        }
    }
}

/// Per-example terms of a batch, each `(B,)`.
#[derive(Debug, Clone)]
pub struct ViBatch {
    pub recon_nll: Tensor,
    pub noisy_nll: Tensor,
    pub kl_y: Tensor,
    pub kl_z: Tensor,
    pub total: Tensor,
}

impl ViBatch {
    /// Batch mean of the total, a scalar tensor.
    pub fn mean_total(&self) -> Result<Tensor> {
        Ok(self.total.mean_all()?)
    }

    /// Batch means of every term.
    pub fn mean_terms(&self) -> Result<ViTerms> {
        let m = |t: &Tensor| -> Result<f64> { Ok(t.mean_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
        Ok(ViTerms {
            recon_nll: m(&self.recon_nll)?,
            noisy_nll: m(&self.noisy_nll)?,
            kl_y: m(&self.kl_y)?,
            kl_z: m(&self.kl_z)?,
            total: m(&self.total)?,
        })
    }
}

/// Free energy of a batch `x` `(B, H, W, C)` with one-hot noisy labels
/// `y_hat` `(B, K)` and standard normal noise `eps` `(B, d_z)`.
pub fn vi_batch(net: &PeerNet, x: &Tensor, y_hat: &Tensor, eps: &Tensor, opts: ViOptions) -> Result<ViBatch> {
    let logits = net.classifier_logits(x)?;
    let log_rho = candle_nn::ops::log_softmax(&logits, D::Minus1)?;
    let rho = log_rho.exp()?;
    let y = relaxed_label_t(&rho, opts.hard_labels)?;
    let (mu, logvar) = net.encode(x, &y)?;
    let z = reparam_sample_t(&mu, &logvar, eps)?;
    let lam = net.decode(&z, &y)?;
    let b = x.dim(0)?;
    let recon_nll = match opts.recon {
        Recon::ContinuousBernoulli => cb_log_prob_t(x, &lam)?.reshape((b, ()))?.sum(1)?.neg()?,
        Recon::Mse => (x - &lam)?.sqr()?.reshape((b, ()))?.sum(1)?,
    };
    let gamma = net.noisy_head_probs(x, &y)?;
    let noisy_nll = categorical_nll_t(&gamma, y_hat)?;
    let kl_y = kl_cat_uniform_t(&log_rho)?;
    let kl_z = kl_diag_gauss_stdnormal_t(&mu, &logvar)?;
    let total = (((&recon_nll + &noisy_nll)? + &kl_y)? + &kl_z)?;
    Ok(ViBatch {
        recon_nll,
        noisy_nll,
        kl_y,
        kl_z,
        total,
    })
}

/// Free energy of a single example; the latent noise comes from `seed`.
pub fn variational_free_energy(
    x: &ImageTensor,
    y_hat: usize,
    net: &PeerNet,
    seed: u64,
    opts: ViOptions,
) -> Result<ViTerms> {
    let k = net.arch().num_classes;
    if y_hat >= k {
        return Err(Error::Param(format!("label {y_hat} out of range for {k} classes")));
    }
    let xt = images_to_tensor(&[x], net.dtype(), net.device())?;
    let yt = one_hot_tensor(&[y_hat], k, net.dtype(), net.device())?;
    let mut rng = seeding::stream(seed, &[]);
    let eps = standard_normal((1, net.arch().latent_dim), &mut rng, net.dtype(), net.device())?;
    vi_batch(net, &xt, &yt, &eps, opts)?.mean_terms()
}

/// `L = L_vi + L_dm`, unweighted.
pub fn total_loss(vi_mean: &Tensor, dm: &Tensor) -> Result<Tensor> {
    Ok((vi_mean + dm)?)
}

/// Scalar form of [`total_loss`].
pub fn total_loss_value(vi_mean: f64, dm: f64) -> f64 {
    vi_mean + dm
}
