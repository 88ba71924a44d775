//! Closed-form probability terms of the objective.
//!
//! Every quantity exists twice: a scalar `f64` form over plain slices, used
//! for validation and tests, and a tensor form used inside training so that
//! gradients flow through it. Both follow the same formulas.

use candle_core::{Tensor, D};

use crate::{Error, Result};

/// Lower/upper clamp for continuous Bernoulli parameters.
pub const CB_EPS: f64 = 1e-6;
/// Probability floor before taking logs in categorical likelihoods.
pub const CAT_EPS: f64 = 1e-7;
/// Half-width of the window around `λ = 0.5` where `log C(λ)` uses its Taylor series.
pub const CB_TAYLOR_WINDOW: f64 = 1e-3;

const SIMPLEX_TOL: f64 = 1e-6;

/// Continuous Bernoulli parameters, one per pixel, clamped to `[ε, 1 - ε]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CBParam {
    lam: Vec<f64>,
}

impl CBParam {
    /// Clamps each entry into `[ε, 1 - ε]`. Entries outside `[0, 1]` (or NaN) are rejected.
    pub fn new(lam: Vec<f64>) -> Result<Self> {
        if let Some(l) = lam.iter().find(|l| !(0.0..=1.0).contains(*l)) {
            return Err(Error::Domain(format!(
                "continuous Bernoulli parameter {l} outside [0, 1]"
            )));
        }
        Ok(Self {
            lam: lam.into_iter().map(|l| l.clamp(CB_EPS, 1.0 - CB_EPS)).collect(),
        })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.lam
    }
}

/// Diagonal Gaussian with mean `mu` and variances `var`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagGaussian {
    pub mu: Vec<f64>,
    pub var: Vec<f64>,
}

impl DiagGaussian {
    pub fn new(mu: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        if mu.len() != var.len() {
            return Err(Error::Param(format!(
                "mean has {} entries, variance {}",
                mu.len(),
                var.len()
            )));
        }
        if let Some(v) = var.iter().find(|v| !(**v > 0.0)) {
            return Err(Error::Domain(format!("variance {v} is not positive")));
        }
        Ok(Self { mu, var })
    }

    pub fn standard(dim: usize) -> Self {
        Self {
            mu: vec![0.0; dim],
            var: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

/// Categorical distribution over `K` classes.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoricalParam {
    rho: Vec<f64>,
}

impl CategoricalParam {
    pub fn new(rho: Vec<f64>) -> Result<Self> {
        if rho.is_empty() {
            return Err(Error::Domain("empty probability vector".into()));
        }
        if rho.iter().any(|p| !(*p >= 0.0)) {
            return Err(Error::Domain("negative or NaN probability".into()));
        }
        let sum: f64 = rho.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::Domain(format!("probabilities sum to {sum}")));
        }
        Ok(Self { rho })
    }

    pub fn uniform(k: usize) -> Self {
        Self {
            rho: vec![1.0 / k as f64; k],
        }
    }

    pub fn probs(&self) -> &[f64] {
        &self.rho
    }

    pub fn num_classes(&self) -> usize {
        self.rho.len()
    }
}

fn check_open_unit(lam: f64) -> Result<()> {
    if !(lam > 0.0 && lam < 1.0) {
        return Err(Error::Domain(format!("λ = {lam} outside (0, 1)")));
    }
    Ok(())
}

/// Series of `log C(λ)` in `t = 1 - 2λ` around `t = 0`.
fn log_norm_taylor(t: f64) -> f64 {
    let t2 = t * t;
    std::f64::consts::LN_2 + t2 / 3.0 + 13.0 / 90.0 * t2 * t2 + 251.0 / 2835.0 * t2 * t2 * t2
}

/// `log C(λ)`, the log normaliser of the continuous Bernoulli density
/// `C(λ) λ^x (1-λ)^(1-x)` on `[0, 1]`, with `C(λ) = 2 atanh(1-2λ) / (1-2λ)`
/// and `C(0.5) = 2`.
pub fn cb_log_norm_const(lam: f64) -> Result<f64> {
    check_open_unit(lam)?;
    let t = 1.0 - 2.0 * lam;
    if (lam - 0.5).abs() < CB_TAYLOR_WINDOW {
        Ok(log_norm_taylor(t))
    } else {
        Ok((2.0 * t.atanh() / t).ln())
    }
}

/// Log density of the continuous Bernoulli at `x ∈ [0, 1]`.
pub fn cb_log_prob(x: f64, lam: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&x) {
        return Err(Error::Domain(format!("x = {x} outside [0, 1]")));
    }
    let log_c = cb_log_norm_const(lam)?;
    Ok(log_c + x * lam.ln() + (1.0 - x) * (1.0 - lam).ln())
}

/// Sum of elementwise log densities.
pub fn cb_log_prob_sum(xs: &[f64], lam: &CBParam) -> Result<f64> {
    if xs.len() != lam.lam.len() {
        return Err(Error::Param(format!(
            "{} observations for {} parameters",
            xs.len(),
            lam.lam.len()
        )));
    }
    xs.iter().zip(&lam.lam).map(|(&x, &l)| cb_log_prob(x, l)).sum()
}

/// `KL[N(μ, diag σ²) || N(0, I)] = ½ Σ (μ² + σ² - log σ² - 1)`.
pub fn kl_diag_gauss_stdnormal(g: &DiagGaussian) -> f64 {
    0.5 * g
        .mu
        .iter()
        .zip(&g.var)
        .map(|(m, v)| m * m + v - v.ln() - 1.0)
        .sum::<f64>()
}

/// `KL[Cat(ρ) || Uniform(K)] = Σ ρ_k log(K ρ_k)`, with `0 log 0 = 0`.
pub fn kl_cat_uniform(c: &CategoricalParam) -> f64 {
    let k = c.rho.len() as f64;
    c.rho
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * (k * p).ln())
        .sum::<f64>()
        .max(0.0)
}

/// `-log ρ_y` for a one-hot `label`, with `ρ` floored at [`CAT_EPS`].
pub fn categorical_nll(c: &CategoricalParam, label: &[f64]) -> Result<f64> {
    if label.len() != c.rho.len() {
        return Err(Error::Param(format!(
            "label has length {}, distribution has {} classes",
            label.len(),
            c.rho.len()
        )));
    }
    let hot: Vec<usize> = label
        .iter()
        .enumerate()
        .filter(|(_, &v)| v != 0.0)
        .map(|(i, _)| i)
        .collect();
    if hot.len() != 1 || label[hot[0]] != 1.0 {
        return Err(Error::Param("label is not one-hot".into()));
    }
    Ok(-c.rho[hot[0]].max(CAT_EPS).ln())
}

/// Tensor form of [`cb_log_norm_const`], elementwise. `lam` must already be
/// inside `(0, 1)`; the Taylor branch is selected per element, and the
/// analytic branch is evaluated at a safe point where it is not selected so
/// gradients stay finite.
pub fn cb_log_norm_const_t(lam: &Tensor) -> Result<Tensor> {
    let t = lam.affine(-2.0, 1.0)?;
    let near_half = lam.affine(1.0, -0.5)?.abs()?.lt(CB_TAYLOR_WINDOW)?;
    let safe_t = near_half.where_cond(&t.ones_like()?.affine(0.5, 0.0)?, &t)?;
    // atanh(t) = ½ (ln(1+t) - ln(1-t))
    let atanh = ((safe_t.affine(1.0, 1.0)?.log()? - safe_t.affine(-1.0, 1.0)?.log()?)? * 0.5)?;
    let analytic = ((atanh / &safe_t)? * 2.0)?.log()?;
    let t2 = t.sqr()?;
    let t4 = t2.sqr()?;
    let t6 = (&t4 * &t2)?;
    let taylor = ((t2 * (1.0 / 3.0))? + (t4 * (13.0 / 90.0))?)?;
    let taylor = ((taylor + (t6 * (251.0 / 2835.0))?)? + std::f64::consts::LN_2)?;
    Ok(near_half.where_cond(&taylor, &analytic)?)
}

/// Tensor form of [`cb_log_prob`], elementwise over matching shapes.
pub fn cb_log_prob_t(x: &Tensor, lam: &Tensor) -> Result<Tensor> {
    let log_c = cb_log_norm_const_t(lam)?;
    let one_minus_x = x.affine(-1.0, 1.0)?;
    let one_minus_lam = lam.affine(-1.0, 1.0)?;
    Ok(((log_c + (x * lam.log()?)?)? + (one_minus_x * one_minus_lam.log()?)?)?)
}

/// Per-row Gaussian KL to the standard normal, parameterised by mean and
/// log-variance, shapes `(B, d)` -> `(B,)`.
pub fn kl_diag_gauss_stdnormal_t(mu: &Tensor, logvar: &Tensor) -> Result<Tensor> {
    let terms = ((mu.sqr()? + logvar.exp()?)? - logvar)?;
    Ok((terms.affine(1.0, -1.0)?.sum(D::Minus1)? * 0.5)?)
}

/// Per-row KL of `Cat(exp(log_probs))` to the uniform distribution, `(B, K)` -> `(B,)`.
pub fn kl_cat_uniform_t(log_probs: &Tensor) -> Result<Tensor> {
    let k = log_probs.dim(D::Minus1)? as f64;
    let probs = log_probs.exp()?;
    Ok((probs * (log_probs + k.ln())?)?.sum(D::Minus1)?)
}

/// Per-row `-Σ_k target_k log max(ρ_k, ε)`, `(B, K)` -> `(B,)`. Reduces to
/// [`categorical_nll`] for one-hot targets.
pub fn categorical_nll_t(probs: &Tensor, targets: &Tensor) -> Result<Tensor> {
    let log_p = probs.clamp(CAT_EPS, 1.0)?.log()?;
    Ok((targets * log_p)?.sum(D::Minus1)?.neg()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Var};
    use proptest::prelude::*;
    use std::f64::consts::LN_2;

    fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
        fn rec(
            f: &dyn Fn(f64) -> f64,
            a: f64,
            b: f64,
            fa: f64,
            fm: f64,
            fb: f64,
            whole: f64,
            tol: f64,
            depth: u32,
        ) -> f64 {
            let m = 0.5 * (a + b);
            let lm = 0.5 * (a + m);
            let rm = 0.5 * (m + b);
            let (flm, frm) = (f(lm), f(rm));
            let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
            let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
            if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
                return left + right + (left + right - whole) / 15.0;
            }
            rec(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
                + rec(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
        }
        let (fa, fb, fm) = (f(a), f(b), f(0.5 * (a + b)));
        let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
        rec(f, a, b, fa, fm, fb, whole, tol, 50)
    }

    #[test]
    fn log_norm_at_half_is_ln2() {
        assert!((cb_log_norm_const(0.5).unwrap() - LN_2).abs() < 1e-12);
    }

    #[test]
    fn log_norm_at_point_nine() {
        // 2 atanh(-0.8) / -0.8 = 2.74653
        let v = cb_log_norm_const(0.9).unwrap();
        assert!((v - 2.746531f64.ln()).abs() < 1e-5, "{v}");
        assert!((v - 1.01034).abs() < 1e-5);
    }

    #[test]
    fn log_norm_symmetry() {
        for lam in [0.01, 0.2, 0.4999, 0.4995, 0.3, 0.45] {
            let a = cb_log_norm_const(lam).unwrap();
            let b = cb_log_norm_const(1.0 - lam).unwrap();
            assert!((a - b).abs() < 1e-12, "{lam}: {a} vs {b}");
        }
    }

    #[test]
    fn log_norm_domain() {
        for lam in [0.0, 1.0, -0.1, 1.5, f64::NAN] {
            assert!(matches!(cb_log_norm_const(lam), Err(Error::Domain(_))));
        }
        assert!(matches!(cb_log_prob(1.1, 0.4), Err(Error::Domain(_))));
    }

    #[test]
    fn log_norm_continuous_across_branch() {
        let d = 1e-7;
        let gap = (cb_log_norm_const(0.5 + d).unwrap() - cb_log_norm_const(0.5 - d).unwrap()).abs();
        assert!(gap < 1e-8);
        // across the Taylor window edge
        let w = CB_TAYLOR_WINDOW;
        let inside = cb_log_norm_const(0.5 + w * (1.0 - 1e-9)).unwrap();
        let outside = cb_log_norm_const(0.5 + w * (1.0 + 1e-9)).unwrap();
        assert!((inside - outside).abs() < 1e-12);
    }

    #[test]
    fn log_norm_slope_matches_analytic_branch() {
        // d/dλ log C at |t| = 1e-3, compared against the derivative of the
        // closed form computed from its own expression.
        let analytic = |lam: f64| {
            let t: f64 = 1.0 - 2.0 * lam;
            (2.0 * t.atanh() / t).ln()
        };
        for lam in [0.5005, 0.4995] {
            let h = 1e-7;
            let fd = (cb_log_norm_const(lam + h).unwrap() - cb_log_norm_const(lam - h).unwrap()) / (2.0 * h);
            let h2 = 1e-5;
            let reference = (analytic(lam + h2) - analytic(lam - h2)) / (2.0 * h2);
            assert!(((fd - reference) / reference).abs() < 1e-4, "{fd} vs {reference}");
        }
    }

    #[test]
    fn log_prob_examples() {
        assert!(cb_log_prob(0.5, 0.5).unwrap().abs() < 1e-15);
        let v = cb_log_prob(1.0, 0.9).unwrap();
        assert!((v - (1.01034 + 0.9f64.ln())).abs() < 1e-5);
        assert!((v - 0.90498).abs() < 1e-5);
    }

    #[test]
    fn density_integrates_to_one() {
        for lam in [0.1, 0.3, 0.5, 0.7, 0.99, 0.4999, 0.5004] {
            let z = simpson(&|x| cb_log_prob(x, lam).unwrap().exp(), 0.0, 1.0, 1e-12);
            assert!((z - 1.0).abs() < 1e-6, "λ={lam}: {z}");
        }
    }

    #[test]
    fn cb_param_clamps() {
        let p = CBParam::new(vec![0.0, 1.0, 0.3]).unwrap();
        assert_eq!(p.as_slice(), &[CB_EPS, 1.0 - CB_EPS, 0.3]);
        assert!(CBParam::new(vec![1.2]).is_err());
        let s = cb_log_prob_sum(&[0.5, 0.5, 0.5], &CBParam::new(vec![0.5; 3]).unwrap()).unwrap();
        assert!(s.abs() < 1e-12);
        assert!(cb_log_prob_sum(&[0.5], &p).is_err());
    }

    #[test]
    fn gaussian_kl_examples() {
        assert_eq!(kl_diag_gauss_stdnormal(&DiagGaussian::standard(7)), 0.0);
        let g = DiagGaussian::new(vec![1.0], vec![1.0]).unwrap();
        assert!((kl_diag_gauss_stdnormal(&g) - 0.5).abs() < 1e-15);
        let g = DiagGaussian::new(vec![0.0], vec![4.0]).unwrap();
        let expected = 0.5 * (4.0 - 4.0f64.ln() - 1.0);
        assert!((kl_diag_gauss_stdnormal(&g) - expected).abs() < 1e-15);
        assert!((expected - 0.806853).abs() < 1e-6);
        assert!(matches!(DiagGaussian::new(vec![0.0], vec![0.0]), Err(Error::Domain(_))));
        assert!(matches!(
            DiagGaussian::new(vec![0.0], vec![-1.0]),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn categorical_kl_examples() {
        assert!(kl_cat_uniform(&CategoricalParam::uniform(5)).abs() < 1e-15);
        let one_hot = CategoricalParam::new(vec![0.0, 1.0, 0.0, 0.0]).unwrap();
        assert!((kl_cat_uniform(&one_hot) - 4.0f64.ln()).abs() < 1e-12);
        let half = CategoricalParam::new(vec![0.5, 0.5, 0.0, 0.0]).unwrap();
        assert!((kl_cat_uniform(&half) - LN_2).abs() < 1e-12);
        assert!(matches!(CategoricalParam::new(vec![0.5, 0.6]), Err(Error::Domain(_))));
        assert!(matches!(CategoricalParam::new(vec![1.5, -0.5]), Err(Error::Domain(_))));
    }

    #[test]
    fn categorical_nll_examples() {
        let c = CategoricalParam::new(vec![0.0, 1.0, 0.0]).unwrap();
        assert!(categorical_nll(&c, &[0.0, 1.0, 0.0]).unwrap() <= 1e-6);
        let u = CategoricalParam::uniform(10);
        let mut label = vec![0.0; 10];
        label[3] = 1.0;
        assert!((categorical_nll(&u, &label).unwrap() - 10f64.ln()).abs() < 1e-12);
        let c = CategoricalParam::new(vec![0.7, 0.3]).unwrap();
        assert!((categorical_nll(&c, &[0.0, 1.0]).unwrap() - 1.203973).abs() < 1e-6);
        assert!(matches!(categorical_nll(&c, &[0.0, 1.0, 0.0]), Err(Error::Param(_))));
        assert!(matches!(categorical_nll(&c, &[0.5, 0.5]), Err(Error::Param(_))));
        // floor at ε
        let c = CategoricalParam::new(vec![1.0, 0.0]).unwrap();
        assert!((categorical_nll(&c, &[0.0, 1.0]).unwrap() - (-(CAT_EPS.ln()))).abs() < 1e-9);
    }

    fn t64(v: &[f64]) -> Tensor {
        Tensor::from_slice(v, v.len(), &Device::Cpu).unwrap()
    }

    #[test]
    fn tensor_forms_agree_with_scalar_forms() {
        let lams = [1e-6, 0.01, 0.3, 0.4995, 0.4999999, 0.5, 0.5002, 0.9, 1.0 - 1e-6];
        let xs = [0.0, 0.2, 1.0, 0.7, 0.5, 0.3, 0.9, 1.0, 0.1];
        let got: Vec<f64> = cb_log_prob_t(&t64(&xs), &t64(&lams)).unwrap().to_vec1().unwrap();
        for i in 0..lams.len() {
            let want = cb_log_prob(xs[i], lams[i]).unwrap();
            assert!((got[i] - want).abs() < 1e-10, "{i}: {} vs {want}", got[i]);
        }

        let mu = Tensor::new(&[[0.3f64, -1.0], [0.0, 0.0]], &Device::Cpu).unwrap();
        let lv = Tensor::new(&[[0.1f64, 0.5], [0.0, 0.0]], &Device::Cpu).unwrap();
        let kl: Vec<f64> = kl_diag_gauss_stdnormal_t(&mu, &lv).unwrap().to_vec1().unwrap();
        let g = DiagGaussian::new(vec![0.3, -1.0], vec![0.1f64.exp(), 0.5f64.exp()]).unwrap();
        assert!((kl[0] - kl_diag_gauss_stdnormal(&g)).abs() < 1e-12);
        assert_eq!(kl[1], 0.0);

        let p = [0.1f64, 0.6, 0.3];
        let lp = Tensor::new(&[[p[0].ln(), p[1].ln(), p[2].ln()]], &Device::Cpu).unwrap();
        let kl: Vec<f64> = kl_cat_uniform_t(&lp).unwrap().to_vec1().unwrap();
        let want = kl_cat_uniform(&CategoricalParam::new(p.to_vec()).unwrap());
        assert!((kl[0] - want).abs() < 1e-12);

        let probs = Tensor::new(&[p], &Device::Cpu).unwrap();
        let target = Tensor::new(&[[0.0f64, 0.0, 1.0]], &Device::Cpu).unwrap();
        let nll: Vec<f64> = categorical_nll_t(&probs, &target).unwrap().to_vec1().unwrap();
        assert!((nll[0] - (-(0.3f64.ln()))).abs() < 1e-12);
    }

    /// Central differences of a scalar function of a vector.
    fn fd_grad(f: &dyn Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                let mut a = x.to_vec();
                let mut b = x.to_vec();
                a[i] += h;
                b[i] -= h;
                (f(&a) - f(&b)) / (2.0 * h)
            })
            .collect()
    }

    fn assert_rel_close(a: &[f64], b: &[f64], tol: f64) {
        for (x, y) in a.iter().zip(b) {
            let denom = x.abs().max(y.abs()).max(1e-8);
            assert!((x - y).abs() / denom < tol, "{x} vs {y}");
        }
    }

    #[test]
    fn tensor_gradients_match_finite_differences() {
        let dev = Device::Cpu;
        // continuous Bernoulli, both branches
        let lams = vec![0.05, 0.3, 0.4996, 0.5003, 0.5, 0.8];
        let xs = vec![0.2, 0.9, 0.4, 0.1, 0.6, 0.5];
        let var = Var::new(lams.as_slice(), &dev).unwrap();
        let x = t64(&xs);
        let loss = cb_log_prob_t(&x, var.as_tensor()).unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        let g: Vec<f64> = grads.get(&var).unwrap().to_vec1().unwrap();
        let f = |l: &[f64]| -> f64 { l.iter().zip(&xs).map(|(&l, &x)| cb_log_prob(x, l).unwrap()).sum() };
        assert_rel_close(&g, &fd_grad(&f, &lams, 1e-7), 1e-5);

        // Gaussian KL w.r.t. mean and log-variance
        let params = vec![0.4, -1.2, 0.3, 0.7];
        let var = Var::new(params.as_slice(), &dev).unwrap();
        let t = var.as_tensor().reshape((1, 4)).unwrap();
        let mu = t.narrow(1, 0, 2).unwrap();
        let lv = t.narrow(1, 2, 2).unwrap();
        let loss = kl_diag_gauss_stdnormal_t(&mu, &lv).unwrap().sum_all().unwrap();
        let g: Vec<f64> = loss.backward().unwrap().get(&var).unwrap().to_vec1().unwrap();
        let f = |p: &[f64]| {
            let g = DiagGaussian::new(p[..2].to_vec(), vec![p[2].exp(), p[3].exp()]).unwrap();
            kl_diag_gauss_stdnormal(&g)
        };
        assert_rel_close(&g, &fd_grad(&f, &params, 1e-6), 1e-5);

        // categorical KL and NLL w.r.t. logits
        let logits = vec![0.2, -0.5, 1.1, 0.0];
        let var = Var::new(logits.as_slice(), &dev).unwrap();
        let l = var.as_tensor().reshape((1, 4)).unwrap();
        let lp = candle_nn::ops::log_softmax(&l, D::Minus1).unwrap();
        let target = Tensor::new(&[[0.0f64, 1.0, 0.0, 0.0]], &dev).unwrap();
        let loss = (kl_cat_uniform_t(&lp).unwrap() + categorical_nll_t(&lp.exp().unwrap(), &target).unwrap())
            .unwrap()
            .sum_all()
            .unwrap();
        let g: Vec<f64> = loss.backward().unwrap().get(&var).unwrap().to_vec1().unwrap();
        let f = |z: &[f64]| {
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = z.iter().map(|v| (v - m).exp()).sum();
            let p: Vec<f64> = z.iter().map(|v| (v - m).exp() / s).collect();
            let c = CategoricalParam::new(p).unwrap();
            kl_cat_uniform(&c) + categorical_nll(&c, &[0.0, 1.0, 0.0, 0.0]).unwrap()
        };
        assert_rel_close(&g, &fd_grad(&f, &logits, 1e-6), 1e-5);
        let _ = DType::F64;
    }

    proptest! {
        #[test]
        fn gaussian_kl_nonnegative(mu in proptest::collection::vec(-5.0f64..5.0, 1..8), seedv in proptest::collection::vec(0.01f64..10.0, 8)) {
            let var = seedv[..mu.len()].to_vec();
            let g = DiagGaussian::new(mu, var).unwrap();
            prop_assert!(kl_diag_gauss_stdnormal(&g) >= 0.0);
        }

        #[test]
        fn categorical_kl_bounded(raw in proptest::collection::vec(0.0f64..1.0, 2..12)) {
            let s: f64 = raw.iter().sum();
            prop_assume!(s > 1e-3);
            let p: Vec<f64> = raw.iter().map(|v| v / s).collect();
            let k = p.len() as f64;
            let kl = kl_cat_uniform(&CategoricalParam::new(p).unwrap());
            prop_assert!(kl >= 0.0);
            prop_assert!(kl <= k.ln() + 1e-12);
        }

        #[test]
        fn log_norm_symmetric_everywhere(lam in 1e-4f64..0.9999) {
            let a = cb_log_norm_const(lam).unwrap();
            let b = cb_log_norm_const(1.0 - lam).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
            prop_assert!(a >= std::f64::consts::LN_2 - 1e-15);
        }
    }
}
