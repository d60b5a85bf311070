//! Gaussian closed forms: the product `f_{Y|X,Z} f_{X|Z}` as a scaled normal kernel in `x`,
//! the closed-form augmentation vector, truncated marginal likelihoods, observation
//! probabilities and conditional expectations over `X | Y, Z`.

use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{CencovError, Result};
use crate::model::{score_into, MeanSpec, Theta};
use crate::numerics::normal::{log_normal_upper_tail, normal_upper_tail};
use crate::numerics::quadrature::{default_rule, refined_rule, GaussHermite};

const LN_2PI: f64 = 1.837_877_066_409_345_3;
const FRAC_1_SQRT_PI: f64 = 0.564_189_583_547_756_3;

pub const PROB_FLOOR: f64 = 1e-12;
pub const PROB_CEIL: f64 = 1.0 - 1e-12;

/// Normal law with mean linear in a covariate vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianConditional {
    pub intercept: f64,
    pub slopes: Vec<f64>,
    pub sd: f64,
}

impl GaussianConditional {
    pub fn new(intercept: f64, slopes: Vec<f64>, sd: f64) -> Result<Self> {
        let g = GaussianConditional { intercept, slopes, sd };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sd > 0.0) || !self.sd.is_finite() {
            return Err(CencovError::InvalidParameter(format!(
                "conditional sd must be positive, got {}",
                self.sd
            )));
        }
        if !self.intercept.is_finite() || self.slopes.iter().any(|s| !s.is_finite()) {
            return Err(CencovError::InvalidParameter("non-finite conditional coefficients".into()));
        }
        Ok(())
    }

    pub fn mean(&self, covariates: &[f64]) -> f64 {
        self.intercept
            + self
                .slopes
                .iter()
                .zip(covariates)
                .map(|(b, v)| b * v)
                .sum::<f64>()
    }

    /// Mean when the first slope multiplies `x` and the rest multiply `z`.
    pub fn mean_with_x(&self, x: f64, z: &[f64]) -> f64 {
        self.intercept
            + self.slopes[0] * x
            + self.slopes[1..]
                .iter()
                .zip(z)
                .map(|(b, v)| b * v)
                .sum::<f64>()
    }

    pub fn check_len(&self, what: &'static str, expected: usize) -> Result<()> {
        if self.slopes.len() != expected {
            return Err(CencovError::DimensionMismatch {
                what,
                expected,
                got: self.slopes.len(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Dependence {
    #[default]
    Ind,
    Dep,
}

/// `f_{Y|X,Z}(y, x) f_X(x) = D * N(x; mu_star, sd_star^2)`, with the exponent
/// `a* x^2 + b* x + c*` kept for reference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProductDecomposition {
    pub a_star: f64,
    pub b_star: f64,
    pub c_star: f64,
    pub e_star: f64,
    pub k: f64,
    pub mu_star: f64,
    pub sd_star: f64,
    pub log_d: f64,
}

/// Decomposition with the x-law given directly by its mean and sd.
pub fn decompose_at(beta: &[f64], sigma: f64, y: f64, z: &[f64], mu_x: f64, sd_x: f64, spec: MeanSpec) -> ProductDecomposition {
    let lp = spec.linear_parts(beta, z);
    let e = y - lp.c0;
    let k = lp.k;
    let s2 = sigma * sigma;
    let vx = sd_x * sd_x;
    let v = s2 + k * k * vx;
    let a_star = -k * k / (2.0 * s2) - 1.0 / (2.0 * vx);
    let b_star = -k * e / s2 + mu_x / vx;
    let c_star = -e * e / (2.0 * s2) - mu_x * mu_x / (2.0 * vx);
    let mu_star = (mu_x * s2 - k * e * vx) / v;
    let sd_star = (vx * s2 / v).sqrt();
    let r = e + k * mu_x;
    let log_d = -0.5 * (LN_2PI + v.ln()) - r * r / (2.0 * v);
    ProductDecomposition { a_star, b_star, c_star, e_star: e, k, mu_star, sd_star, log_d }
}

pub fn normal_product_decompose(
    theta: &Theta,
    y: f64,
    z: &[f64],
    x_dist: &GaussianConditional,
    spec: MeanSpec,
) -> Result<ProductDecomposition> {
    spec.check(theta, z)?;
    x_dist.validate()?;
    Ok(decompose_at(&theta.beta, theta.sigma, y, z, x_dist.mean(z), x_dist.sd, spec))
}

/// Closed-form `E_{X|Y,Z}[S]` written into `out`.
pub(crate) fn expected_score_into(beta: &[f64], sigma: f64, z: &[f64], pd: &ProductDecomposition, spec: MeanSpec, out: &mut [f64]) {
    let lp = spec.linear_parts(beta, z);
    let (e, k, mu) = (pd.e_star, pd.k, pd.mu_star);
    let m2 = pd.sd_star * pd.sd_star + mu * mu;
    let s2 = sigma * sigma;
    let e_eps = (e + k * mu) / s2;
    out[0] = e_eps;
    out[1] = (lp.g0 * e + (lp.g0 * k + lp.g1 * e) * mu + lp.g1 * k * m2) / s2;
    for (o, v) in out[2..beta.len()].iter_mut().zip(spec.slope_covariates(z)) {
        *o = v * e_eps;
    }
    out[beta.len()] = -1.0 / sigma + (e * e + 2.0 * k * e * mu + k * k * m2) / (s2 * sigma);
}

pub fn psi_closed(theta: &Theta, y: f64, z: &[f64], x_dist: &GaussianConditional, spec: MeanSpec) -> Result<Vec<f64>> {
    let pd = normal_product_decompose(theta, y, z, x_dist, spec)?;
    let mut out = vec![0.0; theta.dim()];
    expected_score_into(&theta.beta, theta.sigma, z, &pd, spec, &mut out);
    out.iter_mut().for_each(|v| *v = -*v);
    Ok(out)
}

/// `log int_w^inf f_{Y|X,Z} f_X dx` for an x-law with the given mean and sd.
pub fn censored_loglik_at(beta: &[f64], sigma: f64, y: f64, w: f64, z: &[f64], mu_x: f64, sd_x: f64, spec: MeanSpec) -> f64 {
    let pd = decompose_at(beta, sigma, y, z, mu_x, sd_x, spec);
    pd.log_d + log_normal_upper_tail((w - pd.mu_star) / pd.sd_star)
}

pub fn censored_marginal_loglik(
    theta: &Theta,
    y: f64,
    w: f64,
    z: &[f64],
    x_dist: &GaussianConditional,
    spec: MeanSpec,
) -> Result<f64> {
    spec.check(theta, z)?;
    x_dist.validate()?;
    Ok(censored_loglik_at(&theta.beta, theta.sigma, y, w, z, x_dist.mean(z), x_dist.sd, spec))
}

/// Counts probabilities that had to be clamped into `[1e-12, 1 - 1e-12]`.
#[derive(Debug, Default)]
pub struct ClampCounter(AtomicUsize);

impl ClampCounter {
    pub fn new() -> Self {
        Self::default()
    }
    pub fn get(&self) -> usize {
        self.0.load(Ordering::Relaxed)
    }
    fn bump(&self) {
        self.0.fetch_add(1, Ordering::Relaxed);
    }
}

pub fn clamp_probability(p: f64, counter: Option<&ClampCounter>) -> f64 {
    if !(PROB_FLOOR..=PROB_CEIL).contains(&p) || p.is_nan() {
        if let Some(c) = counter {
            c.bump();
        }
        if p > PROB_CEIL {
            PROB_CEIL
        } else {
            PROB_FLOOR
        }
    } else {
        p
    }
}

/// `Pr(observe X | X = x, Z = z)` as a function of `x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ObservationModel {
    /// `Pr(C >= x | .)` under a Gaussian censoring law. Under `Dep` the first slope is on `x`.
    Censoring { c_dist: GaussianConditional, dependence: Dependence },
    /// Logistic in `(1, x, z)`; a zero x-coefficient gives `pi_Z(z)`.
    Logistic { coef: Vec<f64> },
}

impl ObservationModel {
    pub fn prob(&self, x: f64, z: &[f64], counter: Option<&ClampCounter>) -> f64 {
        let raw = match self {
            ObservationModel::Censoring { c_dist, dependence } => {
                let mu = match dependence {
                    Dependence::Ind => c_dist.mean(z),
                    Dependence::Dep => c_dist.mean_with_x(x, z),
                };
                normal_upper_tail((x - mu) / c_dist.sd)
            }
            ObservationModel::Logistic { coef } => {
                let eta = coef[0]
                    + coef[1] * x
                    + coef[2..].iter().zip(z).map(|(c, v)| c * v).sum::<f64>();
                logistic(eta)
            }
        };
        clamp_probability(raw, counter)
    }

    /// True when the probability does not vary with `x`.
    pub fn is_constant_in_x(&self) -> bool {
        match self {
            ObservationModel::Censoring { .. } => false,
            ObservationModel::Logistic { coef } => coef[1] == 0.0,
        }
    }

    pub fn check(&self, nz: usize) -> Result<()> {
        match self {
            ObservationModel::Censoring { c_dist, dependence } => {
                c_dist.validate()?;
                let expected = match dependence {
                    Dependence::Ind => nz,
                    Dependence::Dep => nz + 1,
                };
                c_dist.check_len("censoring-law slopes", expected)
            }
            ObservationModel::Logistic { coef } => {
                if coef.len() != nz + 2 {
                    return Err(CencovError::DimensionMismatch {
                        what: "logistic coefficients over (1, x, z)",
                        expected: nz + 2,
                        got: coef.len(),
                    });
                }
                Ok(())
            }
        }
    }
}

pub fn logistic(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

pub fn prob_observed_xz(
    x_or_w: f64,
    z: &[f64],
    c_dist: &GaussianConditional,
    dependence: Dependence,
    counter: Option<&ClampCounter>,
) -> f64 {
    ObservationModel::Censoring { c_dist: c_dist.clone(), dependence }.prob(x_or_w, z, counter)
}

/// Gauss-Hermite average of `h` over `N(mu_star, sd_star^2)`; `out` must be zeroed.
pub(crate) fn gaussian_average<H>(pd: &ProductDecomposition, rule: &GaussHermite, mut h: H, out: &mut [f64], scratch: &mut [f64])
where
    H: FnMut(f64, &mut [f64]),
{
    let scale = std::f64::consts::SQRT_2 * pd.sd_star;
    for (t, w) in rule.nodes.iter().zip(&rule.weights) {
        let x = pd.mu_star + scale * t;
        h(x, scratch);
        let wt = w * FRAC_1_SQRT_PI;
        for (o, s) in out.iter_mut().zip(scratch.iter()) {
            *o += wt * s;
        }
    }
}

/// `E_{X|Y,Z}[pi(X, z)]` at an x-law with the given mean and sd.
pub fn prob_observed_yz_at(
    beta: &[f64],
    sigma: f64,
    y: f64,
    z: &[f64],
    mu_x: f64,
    sd_x: f64,
    model: &ObservationModel,
    spec: MeanSpec,
    counter: Option<&ClampCounter>,
) -> f64 {
    let pd = decompose_at(beta, sigma, y, z, mu_x, sd_x, spec);
    let mut acc = [0.0];
    let mut s = [0.0];
    gaussian_average(&pd, default_rule(), |x, o| o[0] = model.prob(x, z, counter), &mut acc, &mut s);
    clamp_probability(acc[0], counter)
}

pub fn prob_observed_yz(
    y: f64,
    z: &[f64],
    theta: &Theta,
    x_dist: &GaussianConditional,
    c_dist: &GaussianConditional,
    dependence: Dependence,
    spec: MeanSpec,
) -> Result<f64> {
    spec.check(theta, z)?;
    x_dist.validate()?;
    let model = ObservationModel::Censoring { c_dist: c_dist.clone(), dependence };
    model.check(z.len())?;
    Ok(prob_observed_yz_at(&theta.beta, theta.sigma, y, z, x_dist.mean(z), x_dist.sd, &model, spec, None))
}

/// Which quadrature table to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeCount {
    Default,
    Refined,
}

/// `E_{X|Y,Z}[h(X)]` by Gauss-Hermite quadrature recentred at `(mu_star, sd_star)`.
pub fn conditional_expectation_x<H>(
    h: H,
    y: f64,
    z: &[f64],
    theta: &Theta,
    x_dist: &GaussianConditional,
    spec: MeanSpec,
    nodes: NodeCount,
) -> Result<Vec<f64>>
where
    H: Fn(f64) -> Vec<f64>,
{
    let pd = normal_product_decompose(theta, y, z, x_dist, spec)?;
    let rule = match nodes {
        NodeCount::Default => default_rule(),
        NodeCount::Refined => refined_rule(),
    };
    let dim = h(pd.mu_star).len();
    let mut out = vec![0.0; dim];
    let mut scratch = vec![0.0; dim];
    gaussian_average(&pd, rule, |x, s| s.copy_from_slice(&h(x)), &mut out, &mut scratch);
    Ok(out)
}

/// As [`conditional_expectation_x`], failing when the default and doubled node counts
/// disagree by more than `1e-6` relative.
pub fn conditional_expectation_x_checked<H>(
    h: H,
    y: f64,
    z: &[f64],
    theta: &Theta,
    x_dist: &GaussianConditional,
    spec: MeanSpec,
) -> Result<Vec<f64>>
where
    H: Fn(f64) -> Vec<f64>,
{
    let a = conditional_expectation_x(&h, y, z, theta, x_dist, spec, NodeCount::Default)?;
    let b = conditional_expectation_x(&h, y, z, theta, x_dist, spec, NodeCount::Refined)?;
    let worst = a
        .iter()
        .zip(&b)
        .map(|(u, v)| (u - v).abs() / v.abs().max(1.0))
        .fold(0.0, f64::max);
    if worst > 1e-6 {
        return Err(CencovError::QuadratureDisagreement(worst));
    }
    Ok(b)
}

/// Augmented-estimator families sharing the effective-Psi construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugKind {
    Acc,
    Macc,
    Aipw,
}

/// Effective Psi at an x-law with the given mean and sd, written into `out`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn psi_effective_at(
    kind: AugKind,
    beta: &[f64],
    sigma: f64,
    y: f64,
    z: &[f64],
    mu_x: f64,
    sd_x: f64,
    model: &ObservationModel,
    spec: MeanSpec,
    rule: &GaussHermite,
    counter: Option<&ClampCounter>,
    out: &mut [f64],
) -> Result<()> {
    let p = beta.len() + 1;
    let pd = decompose_at(beta, sigma, y, z, mu_x, sd_x, spec);
    // Layout: [E S | E pi S | E S/pi | E pi | E 1/pi]
    let mut acc = vec![0.0; 3 * p + 2];
    let mut scratch = vec![0.0; 3 * p + 2];
    gaussian_average(
        &pd,
        rule,
        |x, s| {
            let pi = model.prob(x, z, counter);
            score_into(beta, sigma, y, x, z, spec, &mut s[..p]);
            for j in 0..p {
                s[p + j] = pi * s[j];
                s[2 * p + j] = s[j] / pi;
            }
            s[3 * p] = pi;
            s[3 * p + 1] = 1.0 / pi;
        },
        &mut acc,
        &mut scratch,
    );
    let (es, rest) = acc.split_at(p);
    let (epis, rest) = rest.split_at(p);
    let (esdpi, rest) = rest.split_at(p);
    let (epi, einv) = (rest[0], rest[1]);
    match kind {
        AugKind::Acc => {
            for j in 0..p {
                out[j] = -epis[j] / epi;
            }
        }
        AugKind::Macc | AugKind::Aipw => {
            let den = 1.0 - einv;
            if den.abs() < 1e-10 {
                return Err(CencovError::DegenerateDenominator { y });
            }
            for j in 0..p {
                out[j] = match kind {
                    AugKind::Macc => (epis[j] - es[j]) / den,
                    _ => (es[j] - esdpi[j]) / den,
                };
            }
        }
    }
    Ok(())
}

/// Effective augmentation vector for the chosen family, with `X | Y, Z` built from `x_dist`.
pub fn psi_effective(
    kind: AugKind,
    y: f64,
    z: &[f64],
    theta: &Theta,
    x_dist: &GaussianConditional,
    model: &ObservationModel,
    spec: MeanSpec,
) -> Result<Vec<f64>> {
    spec.check(theta, z)?;
    x_dist.validate()?;
    model.check(z.len())?;
    let mut out = vec![0.0; theta.dim()];
    psi_effective_at(kind, &theta.beta, theta.sigma, y, z, x_dist.mean(z), x_dist.sd, model, spec, default_rule(), None, &mut out)?;
    Ok(out)
}

/// As [`psi_effective`] evaluated with the doubled node table.
pub fn psi_effective_refined(
    kind: AugKind,
    y: f64,
    z: &[f64],
    theta: &Theta,
    x_dist: &GaussianConditional,
    model: &ObservationModel,
    spec: MeanSpec,
) -> Result<Vec<f64>> {
    spec.check(theta, z)?;
    let mut out = vec![0.0; theta.dim()];
    psi_effective_at(kind, &theta.beta, theta.sigma, y, z, x_dist.mean(z), x_dist.sd, model, spec, refined_rule(), None, &mut out)?;
    Ok(out)
}
