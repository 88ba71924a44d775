//! Small-loss partitioning of the training set.
//!
//! Per-sample cross-entropy losses are min-max normalised, a two-component
//! Gaussian mixture is fitted to them, and each example's posterior under the
//! low-mean component is its probability of carrying a clean label.

use rand::seq::IndexedRandom;

use crate::datasets::NoisyDataset;
use crate::distributions::CAT_EPS;
use crate::networks::Classifier;
use crate::seeding::{self, TAG_GMM};
use crate::{Error, Result};

/// Floor applied to mixture variances after every M-step.
pub const VAR_FLOOR: f64 = 1e-6;

/// `-log ρ(x_i)[ŷ_i]` for every training example, not normalised.
pub fn per_sample_ce_raw<C: Classifier + ?Sized>(net: &C, ds: &NoisyDataset) -> Result<Vec<f64>> {
    if net.num_classes() != ds.num_classes {
        return Err(Error::Param(format!(
            "classifier has {} classes, dataset {}",
            net.num_classes(),
            ds.num_classes
        )));
    }
    let images: Vec<_> = ds.images.iter().collect();
    let probs = net.predict_proba(&images)?;
    Ok(probs
        .iter()
        .zip(&ds.noisy_labels)
        .map(|(p, &y)| -p[y].max(CAT_EPS).ln())
        .collect())
}

/// Per-sample losses rescaled to `[0, 1]`.
pub fn per_sample_ce<C: Classifier + ?Sized>(net: &C, ds: &NoisyDataset) -> Result<Vec<f64>> {
    Ok(min_max_normalize(&per_sample_ce_raw(net, ds)?))
}

/// Maps the minimum to 0 and the maximum to 1; constant input maps to zeros.
pub fn min_max_normalize(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    if !(span > 0.0) {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - lo) / span).collect()
}

/// Two-component 1-D Gaussian mixture; component 0 has the lower mean.
#[derive(Debug, Clone, PartialEq)]
pub struct Gmm2 {
    pub means: [f64; 2],
    pub vars: [f64; 2],
    pub weights: [f64; 2],
    /// Mean log-likelihood of the data before each M-step.
    pub log_likelihoods: Vec<f64>,
}

fn log_normal(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * ((2.0 * std::f64::consts::PI * var).ln() + (x - mean).powi(2) / var)
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

impl Gmm2 {
    /// Log of each component's weighted density at `x`.
    fn component_log_densities(&self, x: f64) -> [f64; 2] {
        [0, 1].map(|k| self.weights[k].ln() + log_normal(x, self.means[k], self.vars[k]))
    }

    /// Mean log-likelihood of `xs` under the mixture.
    pub fn mean_log_likelihood(&self, xs: &[f64]) -> f64 {
        xs.iter()
            .map(|&x| {
                let [a, b] = self.component_log_densities(x);
                log_add_exp(a, b)
            })
            .sum::<f64>()
            / xs.len() as f64
    }
}

/// Fits a two-component mixture by EM.
///
/// Means start at the 10th and 90th percentiles, variances at the sample
/// variance, weights at ½. If the two percentiles coincide, two distinct
/// sample values drawn with `seed` are used instead. Iteration stops when the
/// mean log-likelihood improves by less than `tol` or after `max_iter`
/// M-steps.
pub fn fit_gmm2(losses: &[f64], max_iter: usize, tol: f64, seed: u64) -> Result<Gmm2> {
    if losses.len() < 4 {
        return Err(Error::Param(format!("need at least 4 samples, got {}", losses.len())));
    }
    if losses.iter().any(|v| !v.is_finite()) {
        return Err(Error::Param("losses must be finite".into()));
    }
    let mut sorted = losses.to_vec();
    sorted.sort_by(f64::total_cmp);
    if sorted[0] == sorted[sorted.len() - 1] {
        return Err(Error::DegenerateFit("all losses are identical".into()));
    }

    let n = losses.len() as f64;
    let mean = losses.iter().sum::<f64>() / n;
    let var = (losses.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).max(VAR_FLOOR);
    let (mut lo, mut hi) = (percentile(&sorted, 0.1), percentile(&sorted, 0.9));
    if lo == hi {
        let mut rng = seeding::stream(seed, &[TAG_GMM]);
        let mut distinct = sorted.clone();
        distinct.dedup();
        let pick: Vec<f64> = distinct.choose_multiple(&mut rng, 2).cloned().collect();
        lo = pick[0].min(pick[1]);
        hi = pick[0].max(pick[1]);
    }

    let mut g = Gmm2 {
        means: [lo, hi],
        vars: [var, var],
        weights: [0.5, 0.5],
        log_likelihoods: Vec::new(),
    };
    let mut resp = vec![[0.0f64; 2]; losses.len()];
    for _ in 0..max_iter.max(1) {
        // E-step
        let mut ll = 0.0;
        for (r, &x) in resp.iter_mut().zip(losses) {
            let [a, b] = g.component_log_densities(x);
            let total = log_add_exp(a, b);
            ll += total;
            *r = [(a - total).exp(), (b - total).exp()];
        }
        ll /= n;
        let converged = g.log_likelihoods.last().is_some_and(|&prev| ll - prev < tol);
        g.log_likelihoods.push(ll);
        if converged {
            break;
        }
        // M-step
        for k in 0..2 {
            let nk: f64 = resp.iter().map(|r| r[k]).sum();
            if nk < 1e-12 {
                continue;
            }
            let m = resp.iter().zip(losses).map(|(r, x)| r[k] * x).sum::<f64>() / nk;
            let v = resp
                .iter()
                .zip(losses)
                .map(|(r, x)| r[k] * (x - m).powi(2))
                .sum::<f64>()
                / nk;
            g.means[k] = m;
            g.vars[k] = v.max(VAR_FLOOR);
            g.weights[k] = nk / n;
        }
        let total_w = g.weights[0] + g.weights[1];
        g.weights = g.weights.map(|w| w / total_w);
    }
    if g.means[0] > g.means[1] {
        g.means.swap(0, 1);
        g.vars.swap(0, 1);
        g.weights.swap(0, 1);
    }
    Ok(g)
}

/// Posterior probability of the low-mean (clean) component for each loss.
pub fn clean_posterior(g: &Gmm2, losses: &[f64]) -> Vec<f64> {
    losses
        .iter()
        .map(|&x| {
            let [lo, hi] = g.component_log_densities(x);
            // σ(lo - hi), computed without overflow
            let d = lo - hi;
            if d >= 0.0 {
                1.0 / (1.0 + (-d).exp())
            } else {
                let e = d.exp();
                e / (1.0 + e)
            }
        })
        .collect()
}

/// Clean probabilities plus the labelled/unlabelled split they induce.
#[derive(Debug, Clone, PartialEq)]
pub struct CoDividePartition {
    pub w: Vec<f64>,
    pub labelled: Vec<usize>,
    pub unlabelled: Vec<usize>,
}

/// `L = {i : w_i ≥ τ}`, `U` its complement, both in ascending index order.
pub fn partition(w: &[f64], tau: f64) -> Result<CoDividePartition> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::Param(format!("tau must be in (0, 1), got {tau}")));
    }
    let (labelled, unlabelled): (Vec<usize>, Vec<usize>) = (0..w.len()).partition(|&i| w[i] >= tau);
    Ok(CoDividePartition {
        w: w.to_vec(),
        labelled,
        unlabelled,
    })
}

/// Losses, mixture fit and partition for one model.
pub fn co_divide<C: Classifier + ?Sized>(
    net: &C,
    ds: &NoisyDataset,
    tau: f64,
    max_iter: usize,
    tol: f64,
    seed: u64,
) -> Result<CoDividePartition> {
    let losses = per_sample_ce(net, ds)?;
    let g = fit_gmm2(&losses, max_iter, tol, seed)?;
    partition(&clean_posterior(&g, &losses), tau)
}

/// Area under the ROC curve of `scores` for detecting `positive` examples
/// (rank statistic, ties counted as one half). `None` when either class is empty.
pub fn detection_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    let n_pos = positive.iter().filter(|&&p| p).count() as f64;
    let n_neg = positive.len() as f64 - n_pos;
    if n_pos == 0.0 || n_neg == 0.0 {
        return None;
    }
    let rank_sum: f64 = ranks.iter().zip(positive).filter(|(_, &p)| p).map(|(r, _)| r).sum();
    Some((rank_sum - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg))
}
