//! Acceptance checks. Each test prints one `criterion N: PASS|FAIL` line
//! followed by the measured numbers, then asserts the outcome.

use std::path::Path;
use std::sync::OnceLock;
use std::time::Instant;

use candle_core::{DType, Device, Tensor, Var};
use instancegm::codivide::fit_gmm2;
use instancegm::datasets::{inject_idn, synth_shapes, NoisyDataset};
use instancegm::distributions::{
    cb_log_norm_const, cb_log_prob, kl_cat_uniform, kl_diag_gauss_stdnormal, CategoricalParam, DiagGaussian,
    CB_TAYLOR_WINDOW,
};
use instancegm::networks::{one_hot_tensor, standard_normal, ArchConfig, Backbone, PeerNet};
use instancegm::semisup::{build_mix_batch, dividemix_loss, random_perm};
use instancegm::trainer::{evaluate, train, train_ce_baseline, TrainConfig, DETERMINISTIC_ENV, METRICS_FILE};
use instancegm::vi::{vi_batch, ViOptions};
use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn report(n: u32, pass: bool, detail: &str) {
    println!("criterion {n}: {} {detail}", if pass { "PASS" } else { "FAIL" });
}

fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    #[allow(clippy::too_many_arguments)]
    fn rec(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
            return left + right + (left + right - whole) / 15.0;
        }
        rec(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1) + rec(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
    }
    let (fa, fb, fm) = (f(a), f(b), f(0.5 * (a + b)));
    rec(f, a, b, fa, fm, fb, (b - a) / 6.0 * (fa + 4.0 * fm + fb), tol, 50)
}

#[test]
fn criterion_1_continuous_bernoulli() {
    let t0 = Instant::now();
    let mut worst = 0.0f64;
    for lam in [0.01, 0.1, 0.3, 0.4999, 0.5, 0.5001, 0.7, 0.9, 0.99] {
        let mass = simpson(&|x| cb_log_prob(x, lam).unwrap().exp(), 0.0, 1.0, 1e-12);
        worst = worst.max((mass - 1.0).abs());
    }
    let at_half = (cb_log_norm_const(0.5).unwrap() - std::f64::consts::LN_2).abs();
    // both sides of λ = ½ and of the series/closed-form switch, against -ln ∫ λ^x (1-λ)^(1-x) dx
    let mut jump = 0.0f64;
    let w = CB_TAYLOR_WINDOW;
    for d in [1e-9, 1e-6, 1e-4, w * (1.0 - 1e-9), w * (1.0 + 1e-9), 1e-2] {
        for lam in [0.5 - d, 0.5 + d] {
            let oracle = -simpson(&|x| lam.powf(x) * (1.0 - lam).powf(1.0 - x), 0.0, 1.0, 1e-15).ln();
            jump = jump.max((cb_log_norm_const(lam).unwrap() - oracle).abs());
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    let pass = worst <= 1e-6 && at_half <= 1e-12 && jump <= 1e-8 && secs < 1.0;
    report(1, pass, &format!("max |mass-1| {worst:.2e}, |logC(0.5)-ln2| {at_half:.1e}, max |logC-quadrature| near 0.5 {jump:.1e}, {secs:.2}s"));
    assert!(pass);
}

#[test]
fn criterion_2_kl_closed_forms() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let std_normal = Normal::new(0.0, 1.0).unwrap();
    let n = 1_000_000;
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let d = rng.random_range(1..=4);
        let mu: Vec<f64> = (0..d).map(|_| rng.random_range(-1.5..1.5)).collect();
        let var: Vec<f64> = (0..d).map(|_| rng.random_range(0.2..3.0)).collect();
        let g = DiagGaussian::new(mu.clone(), var.clone()).unwrap();
        // E_q[log q(z) − log p(z)] with z = μ + σ ε
        let mut acc = 0.0;
        for _ in 0..n {
            let mut s = 0.0;
            for j in 0..d {
                let e: f64 = std_normal.sample(&mut rng);
                let z = mu[j] + var[j].sqrt() * e;
                s += -0.5 * var[j].ln() - 0.5 * e * e + 0.5 * z * z;
            }
            acc += s;
        }
        worst = worst.max((acc / n as f64 - kl_diag_gauss_stdnormal(&g)).abs());

        let k = rng.random_range(2..=10);
        let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.01..1.0f64).powi(2)).collect();
        let sum: f64 = raw.iter().sum();
        let rho: Vec<f64> = raw.iter().map(|r| r / sum).collect();
        let c = CategoricalParam::new(rho.clone()).unwrap();
        let pick = WeightedIndex::new(&rho).unwrap();
        let acc: f64 = (0..n).map(|_| (rho[pick.sample(&mut rng)] * k as f64).ln()).sum();
        worst = worst.max((acc / n as f64 - kl_cat_uniform(&c)).abs());
    }
    let secs = t0.elapsed().as_secs_f64();
    let pass = worst <= 1e-2 && secs < 30.0;
    report(
        2,
        pass,
        &format!("max |MC - closed form| {worst:.2e} over 40 draws, {secs:.1}s"),
    );
    assert!(pass);
}

fn arch16() -> ArchConfig {
    ArchConfig {
        height: 16,
        width: 16,
        channels: 3,
        num_classes: 4,
        latent_dim: 8,
        backbone: Backbone::Small,
        gen_width: 32,
    }
}

fn random_images(n: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let v: Vec<f64> = (0..n * 768).map(|_| rng.random_range(0.0..1.0)).collect();
    Tensor::from_vec(v, (n, 16, 16, 3), &Device::Cpu).unwrap()
}

fn read_param(v: &Var, i: usize) -> f64 {
    v.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap()[i]
}

fn write_param(v: &Var, i: usize, value: f64) {
    let mut flat = v.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
    flat[i] = value;
    let t = Tensor::from_vec(flat, v.as_tensor().shape(), &Device::Cpu).unwrap();
    v.set(&t).unwrap();
}

#[test]
fn criterion_3_gradient_fidelity() {
    std::env::set_var(DETERMINISTIC_ENV, "1");
    let t0 = Instant::now();
    let dev = Device::Cpu;
    let net = PeerNet::build_with_dtype(&arch16(), 31, DType::F64).unwrap();
    let peer = PeerNet::build_with_dtype(&arch16(), 32, DType::F64).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (nl, nu) = (4, 4);
    let xl = random_images(nl, &mut rng);
    let views_l = vec![xl.clone(), random_images(nl, &mut rng)];
    let views_u = vec![random_images(nu, &mut rng), random_images(nu, &mut rng)];
    let labels: Vec<usize> = (0..nl).map(|_| rng.random_range(0..4)).collect();
    let y = one_hot_tensor(&labels, 4, DType::F64, &dev).unwrap();
    let w = Tensor::new(&[0.9f64, 0.3, 0.7, 0.55], &dev).unwrap();
    let perm = random_perm(2 * (nl + nu), &mut rng);
    // targets and the latent noise are fixed once; the loss is then a
    // deterministic function of the parameters
    let mix = build_mix_batch(&net, &peer, &views_l, &y, &w, &views_u, 0.5, 0.7, &perm).unwrap();
    let eps = standard_normal((nl, 8), &mut rng, DType::F64, &dev).unwrap();
    let loss = || -> Tensor {
        let dm = dividemix_loss(&net, &mix, 12.5, 1.0).unwrap();
        let vi = vi_batch(&net, &xl, &y, &eps, ViOptions::default()).unwrap();
        (dm.total + vi.mean_total().unwrap()).unwrap()
    };
    let grads = loss().backward().unwrap();

    let params: Vec<(&str, &Var)> = net.params().iter().collect();
    let sizes: Vec<usize> = params.iter().map(|(_, v)| v.as_tensor().elem_count()).collect();
    let total: usize = sizes.iter().sum();
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut worst_at = String::new();
    let mut checked = 0;
    // every tensor contributes at least one entry, the rest are uniform over all entries
    let mut picks: Vec<(usize, usize)> = (0..params.len()).map(|p| (p, rng.random_range(0..sizes[p]))).collect();
    while picks.len() < 240 {
        let mut flat = rng.random_range(0..total);
        let mut p = 0;
        while flat >= sizes[p] {
            flat -= sizes[p];
            p += 1;
        }
        picks.push((p, flat));
    }
    for (p, i) in picks {
        let (name, var) = params[p];
        let analytic = grads
            .get(var)
            .map(|g| g.flatten_all().unwrap().to_vec1::<f64>().unwrap()[i])
            .unwrap_or(0.0);
        let orig = read_param(var, i);
        write_param(var, i, orig + h);
        let up = loss().to_scalar::<f64>().unwrap();
        write_param(var, i, orig - h);
        let down = loss().to_scalar::<f64>().unwrap();
        write_param(var, i, orig);
        let numeric = (up - down) / (2.0 * h);
        let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-3);
        if rel > worst {
            worst = rel;
            worst_at = format!("{name}[{i}] fd {numeric:.6e} ad {analytic:.6e}");
        }
        checked += 1;
    }
    let secs = t0.elapsed().as_secs_f64();
    let pass = checked >= 200 && worst < 1e-4 && secs < 300.0;
    report(
        3,
        pass,
        &format!("{checked} parameters, max rel err {worst:.2e} ({worst_at}), {secs:.1}s"),
    );
    assert!(pass);
}

#[test]
fn criterion_4_em() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut drops = 0;
    for d in 0..100 {
        let n = rng.random_range(20..400);
        let (m1, m2) = (rng.random_range(0.0..0.5), rng.random_range(0.3..1.0));
        let (s1, s2) = (rng.random_range(0.01..0.2), rng.random_range(0.01..0.2));
        let xs: Vec<f64> = (0..n)
            .map(|_| {
                let (m, s) = if rng.random_bool(0.5) { (m1, s1) } else { (m2, s2) };
                Normal::new(m, s).unwrap().sample(&mut rng)
            })
            .collect();
        let g = fit_gmm2(&xs, 200, 0.0, d).unwrap();
        drops += g.log_likelihoods.windows(2).filter(|w| w[1] < w[0] - 1e-12).count();
    }
    let (lo, hi) = (Normal::new(0.05, 0.02).unwrap(), Normal::new(0.8, 0.05).unwrap());
    let xs: Vec<f64> = (0..500)
        .map(|_| {
            if rng.random_bool(0.5) {
                lo.sample(&mut rng)
            } else {
                hi.sample(&mut rng)
            }
        })
        .collect();
    let g = fit_gmm2(&xs, 200, 1e-10, 0).unwrap();
    let err = (g.means[0] - 0.05).abs().max((g.means[1] - 0.8).abs());
    let secs = t0.elapsed().as_secs_f64();
    let pass = drops == 0 && err <= 0.05 && secs < 60.0;
    report(
        4,
        pass,
        &format!(
            "{drops} log-likelihood decreases over 100 fits, means {:.4}/{:.4} (err {err:.4}), {secs:.2}s",
            g.means[0], g.means[1]
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_5_noise_statistics() {
    let t0 = Instant::now();
    let clean = synth_shapes(4, 2500, 16, 55).unwrap();
    let mut notes = Vec::new();
    let mut pass = true;
    for rate in [0.2, 0.4, 0.5] {
        let f = inject_idn(&clean, rate, 500).unwrap().flip_fraction().unwrap();
        pass &= (f - rate).abs() <= 0.02;
        notes.push(format!("{rate}->{f:.4}"));
    }
    // re-pair images with other labels of the same class; a generator that
    // ignores image content would flip exactly the same indices
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut shuffled = clean.clone();
    for c in 0..4 {
        let idx: Vec<usize> = (0..clean.len()).filter(|&i| clean.noisy_labels[i] == c).collect();
        let mut perm = idx.clone();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
        for (&dst, &src) in idx.iter().zip(&perm) {
            shuffled.images[dst] = clean.images[src].clone();
        }
    }
    let a = inject_idn(&clean, 0.4, 500).unwrap().flip_mask().unwrap();
    let b = inject_idn(&shuffled, 0.4, 500).unwrap().flip_mask().unwrap();
    let differ = a.iter().zip(&b).filter(|(x, y)| x != y).count() as f64 / a.len() as f64;
    pass &= differ > 0.05;
    let secs = t0.elapsed().as_secs_f64();
    pass &= secs < 60.0;
    report(
        5,
        pass,
        &format!(
            "rates {}, flip masks differ on {:.1}% after re-pairing, {secs:.1}s",
            notes.join(" "),
            differ * 100.0
        ),
    );
    assert!(pass);
}

const SEEDS: [u64; 3] = [0, 1, 2];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Variant {
    DmCb,
    DmMse,
    NoDmMse,
}

impl Variant {
    fn config(self, seed: u64) -> TrainConfig {
        let mut cfg = TrainConfig::desk();
        cfg.seed = seed;
        cfg.use_dividemix = self != Variant::NoDmMse;
        cfg.use_cb_recon = self == Variant::DmCb;
        cfg
    }
}

#[derive(Debug, Clone)]
struct RunResult {
    accuracy: Option<f64>,
    auc: Option<f64>,
    error: Option<String>,
}

struct Experiments {
    baseline: Vec<f64>,
    runs: Vec<(Variant, u64, RunResult)>,
    repro_identical: Result<bool, String>,
    seconds: f64,
    /// baselines plus the three full-configuration runs
    end_to_end_seconds: f64,
    full_run_seconds: f64,
}

fn desk_data(seed: u64) -> (NoisyDataset, NoisyDataset) {
    let train = synth_shapes(4, 100, 16, 100 + seed).unwrap();
    let test = synth_shapes(4, 100, 16, 200 + seed).unwrap();
    (inject_idn(&train, 0.4, 300 + seed).unwrap(), test)
}

fn run_variant(v: Variant, seed: u64, dir: Option<&Path>) -> RunResult {
    let (noisy, test) = desk_data(seed);
    match train(&noisy, Some(&test), &v.config(seed), dir) {
        Ok((_, out)) => RunResult {
            accuracy: out.test_accuracy,
            auc: out.codivide_auc,
            error: None,
        },
        Err(e) => RunResult {
            accuracy: None,
            auc: None,
            error: Some(e.to_string()),
        },
    }
}

fn experiments() -> &'static Experiments {
    static CELL: OnceLock<Experiments> = OnceLock::new();
    CELL.get_or_init(|| {
        std::env::set_var(DETERMINISTIC_ENV, "1");
        let t0 = Instant::now();
        let tmp = tempfile::tempdir().unwrap();
        let baseline = SEEDS
            .iter()
            .map(|&s| {
                let (noisy, test) = desk_data(s);
                let net = train_ce_baseline(&noisy, &Variant::DmCb.config(s)).unwrap();
                evaluate(&net, &test).unwrap()
            })
            .collect();
        let mut end_to_end_seconds = t0.elapsed().as_secs_f64();
        let mut runs = Vec::new();
        let mut full_run_seconds = 0.0f64;
        for &s in &SEEDS {
            for v in [Variant::DmCb, Variant::DmMse, Variant::NoDmMse] {
                let dir = tmp.path().join(format!("{v:?}-{s}"));
                let t = Instant::now();
                runs.push((v, s, run_variant(v, s, Some(&dir))));
                if v == Variant::DmCb {
                    let secs = t.elapsed().as_secs_f64();
                    full_run_seconds = full_run_seconds.max(secs);
                    end_to_end_seconds += secs;
                }
            }
        }
        let again = tmp.path().join("repro");
        let first = tmp.path().join(format!("{:?}-{}", Variant::DmCb, SEEDS[0]));
        let repro_identical = match run_variant(Variant::DmCb, SEEDS[0], Some(&again)).error {
            Some(e) => Err(e),
            None => {
                let a = std::fs::read(first.join(METRICS_FILE)).map_err(|e| e.to_string());
                let b = std::fs::read(again.join(METRICS_FILE)).map_err(|e| e.to_string());
                a.and_then(|a| b.map(|b| a == b && !a.is_empty()))
            }
        };
        Experiments {
            baseline,
            runs,
            repro_identical,
            seconds: t0.elapsed().as_secs_f64(),
            end_to_end_seconds,
            full_run_seconds,
        }
    })
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

/// Accuracies of one variant, with failed runs counted as zero.
fn accuracies(e: &Experiments, v: Variant) -> Vec<f64> {
    e.runs
        .iter()
        .filter(|(rv, _, _)| *rv == v)
        .map(|(_, _, r)| r.accuracy.unwrap_or(0.0))
        .collect()
}

fn errors(e: &Experiments) -> String {
    let errs: Vec<String> = e
        .runs
        .iter()
        .filter_map(|(v, s, r)| r.error.as_ref().map(|m| format!("{v:?}/seed {s}: {m}")))
        .collect();
    if errs.is_empty() {
        String::new()
    } else {
        format!(" errors [{}]", errs.join("; "))
    }
}

#[test]
fn criterion_6_end_to_end() {
    let e = experiments();
    let full = accuracies(e, Variant::DmCb);
    let gaps: Vec<f64> = full.iter().zip(&e.baseline).map(|(a, b)| a - b).collect();
    let gap = median(gaps.clone());
    let aucs: Vec<f64> = e
        .runs
        .iter()
        .filter(|(v, _, _)| *v == Variant::DmCb)
        .map(|(_, _, r)| r.auc.unwrap_or(0.0))
        .collect();
    let auc = median(aucs.clone());
    let pass = gap >= 0.10 && auc >= 0.80 && e.end_to_end_seconds < 1200.0;
    report(
        6,
        pass,
        &format!(
            "InstanceGM {full:.4?} vs CE {:.4?}, median gap {:+.1} pp, final AUC {aucs:.3?} (median {auc:.3}), longest run {:.0}s, baselines plus full runs {:.0}s, all runs {:.0}s{}",
            e.baseline,
            gap * 100.0,
            e.full_run_seconds,
            e.end_to_end_seconds,
            e.seconds,
            errors(e)
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_7_ablation_ladder() {
    let e = experiments();
    let no_dm_mse = median(accuracies(e, Variant::NoDmMse));
    let dm_mse = median(accuracies(e, Variant::DmMse));
    let dm_cb = median(accuracies(e, Variant::DmCb));
    let pass = no_dm_mse <= dm_mse && dm_mse <= dm_cb && e.runs.iter().all(|(_, _, r)| r.error.is_none());
    report(
        7,
        pass,
        &format!(
            "median accuracy no-DM/MSE {no_dm_mse:.4} <= DM/MSE {dm_mse:.4} <= DM/CB {dm_cb:.4}{}",
            errors(e)
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_8_reproducibility() {
    let e = experiments();
    let pass = matches!(e.repro_identical, Ok(true));
    report(
        8,
        pass,
        &format!(
            "metrics.jsonl byte-identical across two seeded runs: {:?}",
            e.repro_identical
        ),
    );
    assert!(pass);
}
