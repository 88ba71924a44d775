//! Warmup, the co-divide/semi-supervised/variational main loop, evaluation,
//! checkpoints and per-epoch metrics.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Tensor, D};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codivide::{clean_posterior, detection_auc, fit_gmm2, per_sample_ce, CoDividePartition};
use crate::datasets::NoisyDataset;
use crate::networks::{
    one_hot_tensor, pixels_to_tensor, standard_normal, ArchConfig, Backbone, Classifier, Ensemble, PeerNet,
};
use crate::optim::{Adam, Sgd};
use crate::seeding::{self, TAG_BASELINE, TAG_TRAIN, TAG_WARMUP};
use crate::semisup::{build_mix_batch, dividemix_loss, lambda_u_at, random_perm, sample_lam_prime, Augmenter};
use crate::vi::{vi_batch, Recon, ViOptions, ViTerms};
use crate::{Error, Result};

pub const CONFIG_FILE: &str = "config.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const REPORT_FILE: &str = "report.csv";
pub const CHECKPOINT_VERSION: u32 = 1;
const STATE_FILE: &str = "state.json";
const OPTIM_FILE: &str = "optim.safetensors";
const W_HIST_BINS: usize = 10;

/// Environment variable that switches on deterministic mode.
pub const DETERMINISTIC_ENV: &str = "INSTANCEGM_DETERMINISTIC";

/// Whether deterministic mode is requested. When it is, kernels are pinned
/// to one thread and wall-clock fields in the metrics are written as zero.
pub fn deterministic_mode() -> bool {
    let on = std::env::var(DETERMINISTIC_ENV).is_ok_and(|v| v == "1");
    if on {
        std::env::set_var("RAYON_NUM_THREADS", "1");
    }
    on
}

/// Every hyperparameter of a training run. Serialised as flat JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub tau: f64,
    pub t_sharpen: f64,
    pub alpha: f64,
    pub lambda_u: f64,
    pub lambda_r: f64,
    pub rampup: f64,
    pub n_aug: usize,
    pub max_shift: usize,
    pub lr_disc: f64,
    pub lr_gen: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_decay_epoch: Option<usize>,
    pub batch_size: usize,
    pub d_z: usize,
    pub backbone: Backbone,
    pub gen_width: usize,
    pub gmm_max_iter: usize,
    pub gmm_tol: f64,
    pub forget_rate: Option<f64>,
    pub seed: u64,
    pub use_dividemix: bool,
    pub use_cb_recon: bool,
    pub vi_on_labelled_only: bool,
    pub ensemble_eval: bool,
    pub hard_labels: bool,
    pub unified_optimizer: bool,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            warmup_epochs: 5,
            tau: 0.5,
            t_sharpen: 0.5,
            alpha: 4.0,
            lambda_u: 25.0,
            lambda_r: 1.0,
            rampup: 16.0,
            n_aug: 2,
            max_shift: 2,
            lr_disc: 0.02,
            lr_gen: 1e-3,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_decay_epoch: None,
            batch_size: 64,
            d_z: 8,
            backbone: Backbone::Small,
            gen_width: 32,
            gmm_max_iter: 50,
            gmm_tol: 1e-6,
            forget_rate: None,
            seed: 0,
            use_dividemix: true,
            use_cb_recon: true,
            vi_on_labelled_only: true,
            ensemble_eval: false,
            hard_labels: false,
            unified_optimizer: false,
            checkpoint_every: 0,
        }
    }
}

/// Key, description and provenance of every config field, in file order.
pub const CONFIG_KEYS: &[(&str, &str)] = &[
    (
        "epochs",
        "main-loop epochs after warmup (desk-scale; paper profile 300)",
    ),
    (
        "warmup_epochs",
        "cross-entropy warmup epochs (desk-scale; paper profile 10)",
    ),
    (
        "tau",
        "clean-probability threshold for the labelled set (inherited DivideMix default)",
    ),
    ("t_sharpen", "sharpening temperature (inherited DivideMix default)"),
    (
        "alpha",
        "Beta(alpha, alpha) mixup parameter (inherited DivideMix default)",
    ),
    ("lambda_u", "weight of the unlabelled loss after ramp-up (desk-scale)"),
    (
        "lambda_r",
        "weight of the uniform-prior regulariser (inherited DivideMix default)",
    ),
    ("rampup", "epochs over which lambda_u ramps up from 0 (desk-scale)"),
    (
        "n_aug",
        "augmented views per example for guessing and mixup (inherited DivideMix default)",
    ),
    (
        "max_shift",
        "maximum pixel shift of the shift-crop augmentation (desk-scale)",
    ),
    ("lr_disc", "SGD learning rate of the classifiers (published setting)"),
    (
        "lr_gen",
        "Adam learning rate of encoder, decoder and noisy-label head (desk-scale)",
    ),
    ("momentum", "SGD momentum (published setting)"),
    ("weight_decay", "SGD L2 weight decay (published setting)"),
    (
        "lr_decay_epoch",
        "main-loop epoch at which both learning rates drop tenfold; null = epochs/2 (published setting)",
    ),
    ("batch_size", "mini-batch size (published setting)"),
    ("d_z", "latent dimension (desk-scale; paper profile 25)"),
    ("backbone", "classifier backbone: small | paper (desk-scale)"),
    (
        "gen_width",
        "first encoder width; encoder uses w,2w,4w,8w and the decoder mirrors it (published widths at 32)",
    ),
    ("gmm_max_iter", "EM iterations for the loss mixture"),
    ("gmm_tol", "EM stopping tolerance on mean log-likelihood"),
    (
        "forget_rate",
        "co-teaching drop fraction when use_dividemix=false; null = dataset noise rate",
    ),
    ("seed", "root seed of every random stream"),
    (
        "use_dividemix",
        "semi-supervised loss on co-divided data; false = co-teaching small-loss selection",
    ),
    (
        "use_cb_recon",
        "continuous Bernoulli reconstruction; false = squared error",
    ),
    (
        "vi_on_labelled_only",
        "evaluate the free energy on the labelled set only",
    ),
    (
        "ensemble_eval",
        "final classifier averages both peers instead of the first",
    ),
    (
        "hard_labels",
        "feed argmax of q(Y|X) to the generative networks instead of the probabilities",
    ),
    (
        "unified_optimizer",
        "train every network with SGD instead of SGD + Adam",
    ),
    (
        "checkpoint_every",
        "save a checkpoint every n epochs; 0 = final epoch only",
    ),
];

impl TrainConfig {
    /// Desk-scale defaults.
    pub fn desk() -> Self {
        Self::default()
    }

    /// Full-size schedule and networks.
    pub fn paper() -> Self {
        Self {
            epochs: 300,
            warmup_epochs: 10,
            d_z: 25,
            backbone: Backbone::Paper,
            ..Self::default()
        }
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            other => Err(Error::Config(format!("unknown profile '{other}'"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return bad("tau must be in (0, 1)");
        }
        if !(self.t_sharpen > 0.0) || !(self.alpha > 0.0) {
            return bad("t_sharpen and alpha must be positive");
        }
        if !(self.lambda_u >= 0.0) || !(self.lambda_r >= 0.0) || !(self.rampup >= 0.0) {
            return bad("lambda_u, lambda_r and rampup must be non-negative");
        }
        if !(self.lr_disc > 0.0) || !(self.lr_gen > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return bad("momentum must be in [0, 1) and weight_decay non-negative");
        }
        if self.batch_size == 0 || self.n_aug == 0 || self.d_z == 0 || self.gen_width == 0 {
            return bad("batch_size, n_aug, d_z and gen_width must be positive");
        }
        if self.gmm_max_iter == 0 || !(self.gmm_tol >= 0.0) {
            return bad("gmm_max_iter must be positive and gmm_tol non-negative");
        }
        if let Some(f) = self.forget_rate {
            if !(0.0..1.0).contains(&f) {
                return bad("forget_rate must be in [0, 1)");
            }
        }
        Ok(())
    }

    /// Sets one key from its textual value. The value is parsed as JSON when
    /// possible and as a bare string otherwise.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut map = match serde_json::to_value(&*self)? {
            serde_json::Value::Object(m) => m,
            _ => unreachable!("config serialises to an object"),
        };
        if !map.contains_key(key) {
            return Err(Error::Config(format!("unknown config key '{key}'")));
        }
        let parsed = serde_json::from_str(value).unwrap_or_else(|_| serde_json::Value::String(value.to_string()));
        map.insert(key.to_string(), parsed);
        *self = serde_json::from_value(serde_json::Value::Object(map))
            .map_err(|e| Error::Config(format!("{key}={value}: {e}")))?;
        Ok(())
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Main-loop epoch at which learning rates drop.
    pub fn decay_epoch(&self) -> usize {
        self.lr_decay_epoch.unwrap_or(self.epochs / 2)
    }

    pub fn arch_for(&self, ds: &NoisyDataset) -> Result<ArchConfig> {
        let (height, width, channels) = ds
            .image_shape()
            .ok_or_else(|| Error::Param("dataset is empty".into()))?;
        let arch = ArchConfig {
            height,
            width,
            channels,
            num_classes: ds.num_classes,
            latent_dim: self.d_z,
            backbone: self.backbone,
            gen_width: self.gen_width,
        };
        arch.validate()?;
        Ok(arch)
    }

    fn vi_options(&self) -> ViOptions {
        ViOptions {
            recon: if self.use_cb_recon {
                Recon::ContinuousBernoulli
            } else {
                Recon::Mse
            },
            hard_labels: self.hard_labels,
        }
    }
}

/// Two independently initialised peers of the same architecture.
#[derive(Debug, Clone)]
pub struct DualModel {
    pub net1: PeerNet,
    pub net2: PeerNet,
}

impl DualModel {
    pub fn new(arch: &ArchConfig, seed: u64) -> Result<Self> {
        Ok(Self {
            net1: PeerNet::build(arch, seeding::derive_seed(seed, &[1]))?,
            net2: PeerNet::build(arch, seeding::derive_seed(seed, &[2]))?,
        })
    }

    pub fn net(&self, k: usize) -> &PeerNet {
        if k == 0 {
            &self.net1
        } else {
            &self.net2
        }
    }
}

/// Fraction of examples whose argmax prediction equals the clean label.
pub fn evaluate<C: Classifier + ?Sized>(classifier: &C, test: &NoisyDataset) -> Result<f64> {
    let clean = test.clean_labels()?;
    if test.is_empty() {
        return Err(Error::Param("empty test set".into()));
    }
    let images: Vec<_> = test.images.iter().collect();
    let probs = classifier.predict_proba(&images)?;
    let correct = probs
        .iter()
        .zip(clean)
        .filter(|(p, &y)| {
            let best = p
                .iter()
                .enumerate()
                .fold(
                    (0, f64::NEG_INFINITY),
                    |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) },
                )
                .0;
            best == y
        })
        .count();
    Ok(correct as f64 / test.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Warmup,
    Main,
}

/// Per-model training statistics of one epoch.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ModelMetrics {
    /// Mean cross-entropy (warmup and co-teaching).
    pub ce: Option<f64>,
    /// Mean free-energy terms.
    pub vi: Option<ViTerms>,
    /// Mean semi-supervised loss.
    pub dm: Option<f64>,
    /// Examples the model was trained on as labelled.
    pub labelled: Option<usize>,
    /// Detection AUC of this model's clean probabilities after the epoch.
    pub auc: Option<f64>,
    /// Histogram of this model's clean probabilities after the epoch.
    pub w_hist: Vec<usize>,
}

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub models: Vec<ModelMetrics>,
    /// Mean per-batch loss over both models.
    pub train_loss: f64,
    pub test_accuracy: Option<f64>,
    /// Mean of the two models' detection AUCs.
    pub codivide_auc: Option<f64>,
    pub wall_seconds: f64,
}

/// Result of a complete run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub records: Vec<MetricsRecord>,
    pub test_accuracy: Option<f64>,
    pub codivide_auc: Option<f64>,
}

#[derive(Debug, Clone)]
struct PeerOptim {
    sgd: Sgd,
    adam: Adam,
}

/// Dense pixel cache of a dataset.
struct Pixels {
    data: Vec<f32>,
    per: usize,
    shape: (usize, usize, usize),
}

impl Pixels {
    fn new(ds: &NoisyDataset) -> Result<Self> {
        let shape = ds
            .image_shape()
            .ok_or_else(|| Error::Param("dataset is empty".into()))?;
        let per = shape.0 * shape.1 * shape.2;
        let mut data = Vec::with_capacity(per * ds.len());
        for im in &ds.images {
            data.extend(im.to_unit());
        }
        Ok(Self { data, per, shape })
    }

    fn gather(&self, idx: &[usize]) -> Vec<f32> {
        let mut out = Vec::with_capacity(idx.len() * self.per);
        for &i in idx {
            out.extend_from_slice(&self.data[i * self.per..(i + 1) * self.per]);
        }
        out
    }
}

/// Training state of a dual model: networks, optimisers and the next epoch.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub dual: DualModel,
    optim: [PeerOptim; 2],
    /// Epochs completed so far, warmup included.
    pub epoch: usize,
}

struct StepSink {
    loss_sum: f64,
    steps: usize,
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn mean(sum: f64, n: usize) -> Option<f64> {
    (n > 0).then(|| sum / n as f64)
}

fn w_histogram(w: &[f64]) -> Vec<usize> {
    let mut h = vec![0; W_HIST_BINS];
    for &v in w {
        h[((v * W_HIST_BINS as f64) as usize).min(W_HIST_BINS - 1)] += 1;
    }
    h
}

/// Per-row cross-entropy of logits against class indices, `(B,)`.
fn ce_rows(logits: &Tensor, y: &Tensor) -> Result<Tensor> {
    let log_p = candle_nn::ops::log_softmax(logits, D::Minus1)?;
    Ok((log_p * y)?.sum(D::Minus1)?.neg()?)
}

impl Trainer {
    pub fn new(cfg: TrainConfig, arch: &ArchConfig) -> Result<Self> {
        cfg.validate()?;
        let dual = DualModel::new(arch, cfg.seed)?;
        let optim = [0, 1].map(|_| PeerOptim {
            sgd: Sgd::new(cfg.lr_disc, cfg.momentum, cfg.weight_decay),
            adam: Adam::new(cfg.lr_gen),
        });
        Ok(Self {
            cfg,
            dual,
            optim,
            epoch: 0,
        })
    }

    pub fn for_dataset(cfg: TrainConfig, ds: &NoisyDataset) -> Result<Self> {
        let arch = cfg.arch_for(ds)?;
        Self::new(cfg, &arch)
    }

    pub fn total_epochs(&self) -> usize {
        self.cfg.warmup_epochs + self.cfg.epochs
    }

    /// `q₁(Y|X)`, or the average of both peers with `ensemble_eval`.
    pub fn final_classifier(&self) -> Box<dyn Classifier + '_> {
        if self.cfg.ensemble_eval {
            Box::new(Ensemble::new(vec![&self.dual.net1, &self.dual.net2]).expect("two members"))
        } else {
            Box::new(&self.dual.net1)
        }
    }

    fn set_learning_rates(&mut self, epoch: usize) {
        let main_epoch = epoch.saturating_sub(self.cfg.warmup_epochs);
        let factor = if epoch >= self.cfg.warmup_epochs && main_epoch >= self.cfg.decay_epoch() {
            0.1
        } else {
            1.0
        };
        for o in &mut self.optim {
            o.sgd.lr = self.cfg.lr_disc * factor;
            o.adam.lr = self.cfg.lr_gen * factor;
        }
    }

    fn step(&mut self, k: usize, loss: &Tensor, epoch: usize, batch: usize, sink: &mut StepSink) -> Result<()> {
        let value = scalar(loss)?;
        if !value.is_finite() {
            return Err(Error::Numeric {
                epoch,
                batch: Some(batch),
                msg: format!("model {} loss is {value}", k + 1),
            });
        }
        sink.loss_sum += value;
        sink.steps += 1;
        let grads = loss.backward()?;
        let net = self.dual.net(k);
        let opt = &mut self.optim[k];
        if self.cfg.unified_optimizer {
            opt.sgd.step(net.params().iter(), &grads)?;
        } else {
            opt.sgd.step(
                net.params().iter().filter(|(n, _)| PeerNet::is_discriminative(n)),
                &grads,
            )?;
            opt.adam.step(
                net.params().iter().filter(|(n, _)| !PeerNet::is_discriminative(n)),
                &grads,
            )?;
        }
        Ok(())
    }

    fn tensor(&self, buf: Vec<f32>, n: usize, shape: (usize, usize, usize)) -> Result<Tensor> {
        let net = &self.dual.net1;
        pixels_to_tensor(buf, n, shape, net.dtype(), net.device())
    }

    fn onehot(&self, labels: &[usize]) -> Result<Tensor> {
        let net = &self.dual.net1;
        one_hot_tensor(labels, net.arch().num_classes, net.dtype(), net.device())
    }

    /// Clean probabilities from model `k`'s per-sample losses.
    fn clean_probs(&self, k: usize, ds: &NoisyDataset, epoch: usize) -> Result<Vec<f64>> {
        let losses = per_sample_ce(self.dual.net(k), ds)?;
        let g = fit_gmm2(
            &losses,
            self.cfg.gmm_max_iter,
            self.cfg.gmm_tol,
            seeding::derive_seed(self.cfg.seed, &[TAG_TRAIN, epoch as u64, k as u64]),
        )?;
        Ok(clean_posterior(&g, &losses))
    }

    fn warmup_epoch(&mut self, ds: &NoisyDataset, px: &Pixels, metrics: &mut [ModelMetrics; 2]) -> Result<StepSink> {
        let epoch = self.epoch;
        let aug = Augmenter::new(px.shape, self.cfg.max_shift);
        let mut sink = StepSink {
            loss_sum: 0.0,
            steps: 0,
        };
        for k in 0..2 {
            let mut rng = seeding::stream(self.cfg.seed, &[TAG_WARMUP, epoch as u64, k as u64]);
            let mut order: Vec<usize> = (0..ds.len()).collect();
            order.shuffle(&mut rng);
            let (mut ce_sum, mut n) = (0.0, 0);
            for (b, idx) in order.chunks(self.cfg.batch_size).enumerate() {
                let x = self.tensor(aug.augment(&px.gather(idx), &mut rng), idx.len(), px.shape)?;
                let labels: Vec<usize> = idx.iter().map(|&i| ds.noisy_labels[i]).collect();
                let y = self.onehot(&labels)?;
                let loss = ce_rows(&self.dual.net(k).classifier_logits(&x)?, &y)?.mean_all()?;
                ce_sum += scalar(&loss)?;
                n += 1;
                self.step(k, &loss, epoch, b, &mut sink)?;
            }
            metrics[k].ce = mean(ce_sum, n);
        }
        Ok(sink)
    }

    fn dividemix_epoch(&mut self, ds: &NoisyDataset, px: &Pixels, metrics: &mut [ModelMetrics; 2]) -> Result<StepSink> {
        let epoch = self.epoch;
        let main_epoch = epoch - self.cfg.warmup_epochs;
        let w = [self.clean_probs(0, ds, epoch)?, self.clean_probs(1, ds, epoch)?];
        let aug = Augmenter::new(px.shape, self.cfg.max_shift);
        let vi_opts = self.cfg.vi_options();
        let bs = self.cfg.batch_size;
        let mut sink = StepSink {
            loss_sum: 0.0,
            steps: 0,
        };
        for k in 0..2 {
            // model k learns from the split its peer produced
            let peer_w = &w[1 - k];
            let part = crate::codivide::partition(peer_w, self.cfg.tau)?;
            let CoDividePartition {
                mut labelled,
                mut unlabelled,
                ..
            } = part;
            if labelled.is_empty() {
                return Err(Error::Training(format!(
                    "epoch {epoch}: labelled partition for model {} is empty; lower tau",
                    k + 1
                )));
            }
            metrics[k].labelled = Some(labelled.len());
            let mut rng = seeding::stream(self.cfg.seed, &[TAG_TRAIN, epoch as u64, k as u64, 1]);
            labelled.shuffle(&mut rng);
            unlabelled.shuffle(&mut rng);
            let num_iter = labelled.len().div_ceil(bs);
            let (mut dm_sum, mut vi_sum, mut n) = (0.0, ViTerms::default(), 0usize);
            for b in 0..num_iter {
                let lb = &labelled[b * bs..((b + 1) * bs).min(labelled.len())];
                let ub: Vec<usize> = if unlabelled.is_empty() {
                    Vec::new()
                } else {
                    (0..lb.len())
                        .map(|j| unlabelled[(b * bs + j) % unlabelled.len()])
                        .collect()
                };
                let raw_l = px.gather(lb);
                let views_l = (0..self.cfg.n_aug)
                    .map(|_| self.tensor(aug.augment(&raw_l, &mut rng), lb.len(), px.shape))
                    .collect::<Result<Vec<_>>>()?;
                let raw_u = px.gather(&ub);
                let views_u = if ub.is_empty() {
                    Vec::new()
                } else {
                    (0..self.cfg.n_aug)
                        .map(|_| self.tensor(aug.augment(&raw_u, &mut rng), ub.len(), px.shape))
                        .collect::<Result<Vec<_>>>()?
                };
                let labels: Vec<usize> = lb.iter().map(|&i| ds.noisy_labels[i]).collect();
                let y = self.onehot(&labels)?;
                let net = self.dual.net(k);
                let wl = Tensor::from_vec(
                    lb.iter().map(|&i| peer_w[i]).collect::<Vec<f64>>(),
                    lb.len(),
                    net.device(),
                )?
                .to_dtype(net.dtype())?;
                let n_total = self.cfg.n_aug * (lb.len() + ub.len());
                let lam_prime = sample_lam_prime(self.cfg.alpha, &mut rng)?;
                let perm = random_perm(n_total, &mut rng);
                let mix = build_mix_batch(
                    net,
                    self.dual.net(1 - k),
                    &views_l,
                    &y,
                    &wl,
                    &views_u,
                    self.cfg.t_sharpen,
                    lam_prime,
                    &perm,
                )?;
                let progress = main_epoch as f64 + b as f64 / num_iter as f64;
                let lambda_u = lambda_u_at(progress, self.cfg.lambda_u, self.cfg.rampup);
                let dm = dividemix_loss(net, &mix, lambda_u, self.cfg.lambda_r)?;

                let (vi_x, vi_y, vi_n) = if self.cfg.vi_on_labelled_only || ub.is_empty() {
                    (self.tensor(raw_l, lb.len(), px.shape)?, y, lb.len())
                } else {
                    let all: Vec<usize> = lb.iter().chain(&ub).cloned().collect();
                    let all_labels: Vec<usize> = all.iter().map(|&i| ds.noisy_labels[i]).collect();
                    (
                        self.tensor(px.gather(&all), all.len(), px.shape)?,
                        self.onehot(&all_labels)?,
                        all.len(),
                    )
                };
                let eps = standard_normal((vi_n, self.cfg.d_z), &mut rng, net.dtype(), net.device())?;
                let vi = vi_batch(net, &vi_x, &vi_y, &eps, vi_opts)?;
                let loss = (&dm.total + vi.mean_total()?)?;
                dm_sum += scalar(&dm.total)?;
                vi_sum = add_terms(vi_sum, vi.mean_terms()?);
                n += 1;
                self.step(k, &loss, epoch, b, &mut sink)?;
            }
            metrics[k].dm = mean(dm_sum, n);
            metrics[k].vi = Some(scale_terms(vi_sum, n));
        }
        Ok(sink)
    }

    fn coteaching_epoch(
        &mut self,
        ds: &NoisyDataset,
        px: &Pixels,
        metrics: &mut [ModelMetrics; 2],
    ) -> Result<StepSink> {
        let epoch = self.epoch;
        let main_epoch = epoch - self.cfg.warmup_epochs;
        let forget = self.cfg.forget_rate.unwrap_or(ds.noise_rate) * (main_epoch as f64 / 10.0).min(1.0);
        let aug = Augmenter::new(px.shape, self.cfg.max_shift);
        let vi_opts = self.cfg.vi_options();
        let mut rng = seeding::stream(self.cfg.seed, &[TAG_TRAIN, epoch as u64, 2]);
        let mut order: Vec<usize> = (0..ds.len()).collect();
        order.shuffle(&mut rng);
        let mut sink = StepSink {
            loss_sum: 0.0,
            steps: 0,
        };
        let mut ce_sum = [0.0; 2];
        let mut vi_sum = [ViTerms::default(); 2];
        let mut n = 0;
        for (b, idx) in order.chunks(self.cfg.batch_size).enumerate() {
            let raw = px.gather(idx);
            let x = self.tensor(aug.augment(&raw, &mut rng), idx.len(), px.shape)?;
            let labels: Vec<usize> = idx.iter().map(|&i| ds.noisy_labels[i]).collect();
            let y = self.onehot(&labels)?;
            let keep = (((1.0 - forget) * idx.len() as f64).ceil() as usize).clamp(1, idx.len());
            // each model trains on the small-loss rows chosen by its peer
            let mut chosen = [Vec::new(), Vec::new()];
            for k in 0..2 {
                let losses: Vec<f64> = ce_rows(&self.dual.net(k).classifier_logits(&x)?.detach(), &y)?
                    .to_dtype(DType::F64)?
                    .to_vec1()?;
                let mut rank: Vec<usize> = (0..idx.len()).collect();
                rank.sort_by(|&a, &c| losses[a].total_cmp(&losses[c]).then(a.cmp(&c)));
                rank.truncate(keep);
                chosen[1 - k] = rank.into_iter().map(|r| r as u32).collect::<Vec<u32>>();
            }
            let raw_x = self.tensor(raw, idx.len(), px.shape)?;
            for k in 0..2 {
                let net = self.dual.net(k);
                let sel = Tensor::from_vec(chosen[k].clone(), chosen[k].len(), net.device())?;
                let ce = ce_rows(
                    &net.classifier_logits(&x.index_select(&sel, 0)?)?,
                    &y.index_select(&sel, 0)?,
                )?
                .mean_all()?;
                let eps = standard_normal((idx.len(), self.cfg.d_z), &mut rng, net.dtype(), net.device())?;
                let vi = vi_batch(net, &raw_x, &y, &eps, vi_opts)?;
                let loss = (&ce + vi.mean_total()?)?;
                ce_sum[k] += scalar(&ce)?;
                vi_sum[k] = add_terms(vi_sum[k], vi.mean_terms()?);
                self.step(k, &loss, epoch, b, &mut sink)?;
            }
            n += 1;
        }
        for k in 0..2 {
            metrics[k].ce = mean(ce_sum[k], n);
            metrics[k].vi = Some(scale_terms(vi_sum[k], n));
            metrics[k].labelled = Some(ds.len());
        }
        Ok(sink)
    }

    /// Runs one epoch (warmup or main) and returns its metrics record.
    pub fn run_epoch(&mut self, ds: &NoisyDataset, test: Option<&NoisyDataset>) -> Result<MetricsRecord> {
        let px = Pixels::new(ds)?;
        self.run_epoch_cached(ds, &px, test)
    }

    fn run_epoch_cached(
        &mut self,
        ds: &NoisyDataset,
        px: &Pixels,
        test: Option<&NoisyDataset>,
    ) -> Result<MetricsRecord> {
        let started = Instant::now();
        let epoch = self.epoch;
        self.set_learning_rates(epoch);
        let mut metrics: [ModelMetrics; 2] = Default::default();
        let (phase, sink) = if epoch < self.cfg.warmup_epochs {
            (Phase::Warmup, self.warmup_epoch(ds, px, &mut metrics)?)
        } else if self.cfg.use_dividemix {
            (Phase::Main, self.dividemix_epoch(ds, px, &mut metrics)?)
        } else {
            (Phase::Main, self.coteaching_epoch(ds, px, &mut metrics)?)
        };
        let train_loss = mean(sink.loss_sum, sink.steps).unwrap_or(0.0);
        if !train_loss.is_finite() {
            return Err(Error::Numeric {
                epoch,
                batch: None,
                msg: format!("mean training loss is {train_loss}"),
            });
        }

        let flips = ds.flip_mask().ok();
        let mut aucs = Vec::new();
        for (k, m) in metrics.iter_mut().enumerate() {
            // a degenerate loss distribution leaves the diagnostics empty
            if let Ok(w) = self.clean_probs(k, ds, epoch + 1) {
                m.w_hist = w_histogram(&w);
                if let Some(flips) = &flips {
                    let clean: Vec<bool> = flips.iter().map(|f| !f).collect();
                    m.auc = detection_auc(&w, &clean);
                    aucs.extend(m.auc);
                }
            }
        }
        let codivide_auc = (aucs.len() == 2).then(|| (aucs[0] + aucs[1]) / 2.0);
        let test_accuracy = match test {
            Some(t) => Some(evaluate(self.final_classifier().as_ref(), t)?),
            None => None,
        };
        self.epoch += 1;
        Ok(MetricsRecord {
            epoch,
            phase,
            models: metrics.to_vec(),
            train_loss,
            test_accuracy,
            codivide_auc,
            wall_seconds: if deterministic_mode() {
                0.0
            } else {
                started.elapsed().as_secs_f64()
            },
        })
    }

    /// Trains until `total_epochs`, writing run artefacts to `run_dir` if given.
    pub fn run(
        &mut self,
        ds: &NoisyDataset,
        test: Option<&NoisyDataset>,
        run_dir: Option<&Path>,
    ) -> Result<TrainOutcome> {
        ds.validate()?;
        let px = Pixels::new(ds)?;
        let mut records = Vec::new();
        if let Some(dir) = run_dir {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            write_json(&dir.join(CONFIG_FILE), &self.cfg)?;
            records = read_metrics(&dir.join(METRICS_FILE))?
                .into_iter()
                .filter(|r| r.epoch < self.epoch)
                .collect();
            let mut text = String::new();
            for r in &records {
                text.push_str(&serde_json::to_string(r)?);
                text.push('\n');
            }
            let path = dir.join(METRICS_FILE);
            fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        }
        while self.epoch < self.total_epochs() {
            let rec = self.run_epoch_cached(ds, &px, test)?;
            if let Some(dir) = run_dir {
                append_metrics(&dir.join(METRICS_FILE), &rec)?;
                let every = self.cfg.checkpoint_every;
                if self.epoch == self.total_epochs() || (every > 0 && self.epoch.is_multiple_of(every)) {
                    self.save_checkpoint(&checkpoint_dir(dir, self.epoch))?;
                }
            }
            records.push(rec);
        }
        let last = records.last();
        let outcome = TrainOutcome {
            test_accuracy: last.and_then(|r| r.test_accuracy),
            codivide_auc: last.and_then(|r| r.codivide_auc),
            records,
        };
        if let Some(dir) = run_dir {
            write_report(
                &dir.join(REPORT_FILE),
                &[ReportRow::from_run(&self.cfg, &outcome, &dir.display().to_string())],
            )?;
        }
        Ok(outcome)
    }

    /// Writes networks, optimiser state and a sidecar JSON to `dir`.
    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.dual.net1.save(dir.join("net1.safetensors"))?;
        self.dual.net2.save(dir.join("net2.safetensors"))?;
        let mut state = std::collections::HashMap::new();
        for (k, o) in self.optim.iter().enumerate() {
            state.extend(o.sgd.state(&format!("sgd{k}.")));
            state.extend(o.adam.state(&format!("adam{k}."))?);
        }
        if state.is_empty() {
            // safetensors cannot hold an empty map
            state.insert(
                "empty".to_string(),
                Tensor::zeros(1, DType::F32, self.dual.net1.device())?,
            );
        }
        candle_core::safetensors::save(&state, dir.join(OPTIM_FILE))?;
        let sidecar = CheckpointState {
            version: CHECKPOINT_VERSION,
            epoch: self.epoch,
            seed: self.cfg.seed,
            arch: self.dual.net1.arch().clone(),
            config: self.cfg.clone(),
        };
        write_json(&dir.join(STATE_FILE), &sidecar)
    }

    /// Restores a trainer saved by [`Trainer::save_checkpoint`].
    pub fn load_checkpoint(dir: &Path) -> Result<Self> {
        let path = dir.join(STATE_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let raw: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let version = raw.get("version").and_then(|v| v.as_u64());
        if version != Some(CHECKPOINT_VERSION as u64) {
            return Err(Error::Format(format!(
                "checkpoint version {version:?}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let state: CheckpointState =
            serde_json::from_value(raw).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let mut t = Trainer::new(state.config, &state.arch)?;
        t.dual.net1.load(dir.join("net1.safetensors"))?;
        t.dual.net2.load(dir.join("net2.safetensors"))?;
        let opath = dir.join(OPTIM_FILE);
        let tensors = candle_core::safetensors::load(&opath, t.dual.net1.device())
            .map_err(|e| Error::Format(format!("{}: {e}", opath.display())))?;
        for (k, o) in t.optim.iter_mut().enumerate() {
            o.sgd.load_state(&format!("sgd{k}."), &tensors);
            o.adam.load_state(&format!("adam{k}."), &tensors)?;
        }
        t.epoch = state.epoch;
        Ok(t)
    }
}

fn add_terms(a: ViTerms, b: ViTerms) -> ViTerms {
    ViTerms {
        recon_nll: a.recon_nll + b.recon_nll,
        noisy_nll: a.noisy_nll + b.noisy_nll,
        kl_y: a.kl_y + b.kl_y,
        kl_z: a.kl_z + b.kl_z,
        total: a.total + b.total,
    }
}

fn scale_terms(a: ViTerms, n: usize) -> ViTerms {
    let s = 1.0 / n.max(1) as f64;
    ViTerms {
        recon_nll: a.recon_nll * s,
        noisy_nll: a.noisy_nll * s,
        kl_y: a.kl_y * s,
        kl_z: a.kl_z * s,
        total: a.total * s,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointState {
    version: u32,
    epoch: usize,
    seed: u64,
    arch: ArchConfig,
    config: TrainConfig,
}

pub fn checkpoint_dir(run_dir: &Path, epoch: usize) -> PathBuf {
    run_dir.join(format!("ckpt_{epoch}"))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn append_metrics(path: &Path, rec: &MetricsRecord) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{}", serde_json::to_string(rec)?).map_err(|e| Error::io(path, e))
}

/// Reads `metrics.jsonl`; a missing file reads as empty.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Format(format!("{}: {e}", path.display()))))
        .collect()
}

/// Warms up both classifiers of `dual` with cross-entropy on the noisy labels.
pub fn warmup(dual: DualModel, ds: &NoisyDataset, cfg: &TrainConfig) -> Result<DualModel> {
    let arch = dual.net1.arch().clone();
    let mut t = Trainer::new(cfg.clone(), &arch)?;
    t.dual = dual;
    let px = Pixels::new(ds)?;
    while t.epoch < cfg.warmup_epochs {
        t.run_epoch_cached(ds, &px, None)?;
    }
    Ok(t.dual)
}

/// Full run from scratch: warmup then the main loop.
pub fn train(
    ds: &NoisyDataset,
    test: Option<&NoisyDataset>,
    cfg: &TrainConfig,
    run_dir: Option<&Path>,
) -> Result<(Trainer, TrainOutcome)> {
    let mut t = Trainer::for_dataset(cfg.clone(), ds)?;
    let outcome = t.run(ds, test, run_dir)?;
    Ok((t, outcome))
}

/// Plain cross-entropy on the noisy labels for `warmup_epochs + epochs`
/// epochs, same augmentation and learning-rate schedule, one classifier.
pub fn train_ce_baseline(ds: &NoisyDataset, cfg: &TrainConfig) -> Result<PeerNet> {
    cfg.validate()?;
    let arch = cfg.arch_for(ds)?;
    let net = PeerNet::build(&arch, seeding::derive_seed(cfg.seed, &[1]))?;
    let px = Pixels::new(ds)?;
    let aug = Augmenter::new(px.shape, cfg.max_shift);
    let mut sgd = Sgd::new(cfg.lr_disc, cfg.momentum, cfg.weight_decay);
    let total = cfg.warmup_epochs + cfg.epochs;
    for epoch in 0..total {
        sgd.lr = if epoch >= cfg.warmup_epochs + cfg.decay_epoch() {
            cfg.lr_disc * 0.1
        } else {
            cfg.lr_disc
        };
        let mut rng: ChaCha8Rng = seeding::stream(cfg.seed, &[TAG_BASELINE, epoch as u64]);
        let mut order: Vec<usize> = (0..ds.len()).collect();
        order.shuffle(&mut rng);
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let x = pixels_to_tensor(
                aug.augment(&px.gather(idx), &mut rng),
                idx.len(),
                px.shape,
                net.dtype(),
                net.device(),
            )?;
            let labels: Vec<usize> = idx.iter().map(|&i| ds.noisy_labels[i]).collect();
            let y = one_hot_tensor(&labels, ds.num_classes, net.dtype(), net.device())?;
            let loss = ce_rows(&net.classifier_logits(&x)?, &y)?.mean_all()?;
            let v = scalar(&loss)?;
            if !v.is_finite() {
                return Err(Error::Numeric {
                    epoch,
                    batch: Some(b),
                    msg: format!("baseline loss is {v}"),
                });
            }
            sgd.step(
                net.params().iter().filter(|(n, _)| PeerNet::is_discriminative(n)),
                &loss.backward()?,
            )?;
        }
    }
    Ok(net)
}

/// One row of `report.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub run: String,
    pub seed: u64,
    pub use_dividemix: bool,
    pub use_cb_recon: bool,
    pub vi_on_labelled_only: bool,
    pub ensemble_eval: bool,
    pub epochs: usize,
    pub test_accuracy: Option<f64>,
    pub codivide_auc: Option<f64>,
}

impl ReportRow {
    pub fn from_run(cfg: &TrainConfig, outcome: &TrainOutcome, run: &str) -> Self {
        Self::from_parts(cfg, outcome.records.last(), run)
    }

    pub fn from_parts(cfg: &TrainConfig, last: Option<&MetricsRecord>, run: &str) -> Self {
        Self {
            run: run.to_string(),
            seed: cfg.seed,
            use_dividemix: cfg.use_dividemix,
            use_cb_recon: cfg.use_cb_recon,
            vi_on_labelled_only: cfg.vi_on_labelled_only,
            ensemble_eval: cfg.ensemble_eval,
            epochs: cfg.epochs,
            test_accuracy: last.and_then(|r| r.test_accuracy),
            codivide_auc: last.and_then(|r| r.codivide_auc),
        }
    }
}

pub fn write_report(path: &Path, rows: &[ReportRow]) -> Result<()> {
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    let mut text = String::from(
        "run,seed,use_dividemix,use_cb_recon,vi_on_labelled_only,ensemble_eval,epochs,test_accuracy,codivide_auc\n",
    );
    for r in rows {
        text.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.run.replace(',', "_"),
            r.seed,
            r.use_dividemix,
            r.use_cb_recon,
            r.vi_on_labelled_only,
            r.ensemble_eval,
            r.epochs,
            opt(r.test_accuracy),
            opt(r.codivide_auc)
        ));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
