//! Learning an accurate clean-label image classifier from instance-dependent
//! noisy labels.
//!
//! Two peer models are trained jointly. Each peer holds a clean-label
//! classifier `q(Y|X)`, an encoder `q(Z|X,Y)`, a decoder `p(X|Z,Y)` with a
//! continuous Bernoulli image likelihood and a noisy-label head
//! `p(Ŷ|X,Y)`. Training alternates a small-loss co-divide (two-component
//! GMM over per-sample losses) with minimisation of the sum of a
//! semi-supervised MixMatch-style loss and the variational free energy of
//! the generative model.
//!
//! Module map:
//! - [`datasets`]: synthetic image data, label-noise injection, on-disk format.
//! - [`distributions`]: continuous Bernoulli, Gaussian and categorical terms.
//! - [`networks`]: the four networks of a peer and the convolution kernels.
//! - [`codivide`]: per-sample losses, GMM fitting, clean posterior, partition.
//! - [`semisup`]: sharpening, co-refinement, co-guessing, mixup, loss.
//! - [`vi`]: variational free energy and the combined objective.
//! - [`trainer`]: warmup, main loop, evaluation, checkpoints, metrics.
//! - [`cli`]: command-line front end.

// parameter checks use `!(x > 0.0)` so that NaN is rejected too
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod codivide;
pub mod datasets;
pub mod distributions;
pub mod error;
pub mod networks;
pub mod optim;
pub mod seeding;
pub mod semisup;
pub mod trainer;
pub mod vi;

pub use error::{Error, Result};
