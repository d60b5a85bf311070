//! Estimating-function families for the censored and missing covariate problems, the
//! projection matrix that guarantees an efficiency gain, and the fitting pipeline.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::closed_forms::{
    censored_loglik_at, clamp_probability, decompose_at, expected_score_into, logistic, prob_observed_yz_at,
    psi_effective_at, AugKind, ClampCounter, Dependence, GaussianConditional, ObservationModel,
};
use crate::error::{CencovError, Result};
use crate::inference::{sandwich_parts, NuisanceCorrection, SandwichParts};
use crate::model::{score_into, CensoredObservation, MeanSpec, MissingObservation, Theta};
use crate::nuisance::{
    fit_alpha, fit_logistic_kappa, fit_logistic_pi_z, fit_x_given_z_complete_cases, BlockSource, LogisticTarget,
    MisspecInjector, NuisanceBundle, NuisanceEstimates,
};
use crate::numerics::quadrature::default_rule;
use crate::numerics::solver::{numeric_jacobian, relative_steps, solve_estimating_equation, SolverConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    Cc,
    Ipw,
    Mle,
    Acc,
    Macc,
    Aipw,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Problem {
    #[default]
    Cens,
    Miss,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PsiMode {
    Effective,
    #[default]
    Closed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LambdaMode {
    #[default]
    None,
    Plain,
    NuisanceAdjusted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ProbabilitySource {
    #[default]
    Analytic,
    Logistic,
    Injected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EstimatorSpec {
    pub kind: EstimatorKind,
    #[serde(default)]
    pub problem: Problem,
    #[serde(default)]
    pub dependence: Dependence,
    #[serde(default)]
    pub psi_mode: PsiMode,
    #[serde(default)]
    pub lambda_mode: LambdaMode,
    #[serde(default)]
    pub probability_source: ProbabilitySource,
}

impl EstimatorSpec {
    pub fn new(kind: EstimatorKind) -> Self {
        EstimatorSpec {
            kind,
            problem: Problem::Cens,
            dependence: Dependence::Ind,
            psi_mode: PsiMode::Closed,
            lambda_mode: LambdaMode::None,
            probability_source: ProbabilitySource::Analytic,
        }
    }

    pub fn with_lambda(mut self, mode: LambdaMode) -> Self {
        self.lambda_mode = mode;
        self
    }

    pub fn with_psi(mut self, mode: PsiMode) -> Self {
        self.psi_mode = mode;
        self
    }

    pub fn with_dependence(mut self, d: Dependence) -> Self {
        self.dependence = d;
        self
    }

    pub fn with_problem(mut self, p: Problem) -> Self {
        self.problem = p;
        self
    }

    pub fn with_probability(mut self, s: ProbabilitySource) -> Self {
        self.probability_source = s;
        self
    }

    pub fn aug_kind(&self) -> Option<AugKind> {
        match self.kind {
            EstimatorKind::Acc => Some(AugKind::Acc),
            EstimatorKind::Macc => Some(AugKind::Macc),
            EstimatorKind::Aipw => Some(AugKind::Aipw),
            _ => None,
        }
    }

    /// Rejects combinations that have no defined estimating function.
    pub fn validate(&self) -> Result<()> {
        if self.kind == EstimatorKind::Mle && self.problem == Problem::Miss && self.dependence == Dependence::Dep {
            return Err(CencovError::Config(
                "MLE is not available for the missing-covariate problem under dependent missingness: \
                 the integration domain is unknown"
                    .into(),
            ));
        }
        if self.aug_kind().is_none() && self.lambda_mode != LambdaMode::None && self.kind != EstimatorKind::Cc {
            return Err(CencovError::Config(format!("{:?} has no augmentation term to project", self.kind)));
        }
        Ok(())
    }

    fn needs_pi_w(&self) -> bool {
        matches!(self.kind, EstimatorKind::Ipw | EstimatorKind::Macc | EstimatorKind::Aipw)
    }

    fn needs_pi_yz(&self) -> bool {
        self.kind == EstimatorKind::Acc
    }

    fn needs_x_law(&self) -> bool {
        self.aug_kind().is_some() || self.kind == EstimatorKind::Mle
    }
}

/// One record in either layout: `x` holds `w` (censored) or the observed `x` (missing).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub y: f64,
    pub x: f64,
    pub observed: bool,
    pub z: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub problem: Problem,
    pub mean: MeanSpec,
    pub records: Vec<Record>,
}

impl Dataset {
    pub fn censored(obs: &[CensoredObservation], mean: MeanSpec) -> Result<Self> {
        for (i, o) in obs.iter().enumerate() {
            o.validate(i)?;
        }
        let records = obs
            .iter()
            .map(|o| Record { y: o.y, x: o.w, observed: o.delta == 1, z: o.z.clone() })
            .collect();
        Self::checked(Problem::Cens, mean, records)
    }

    pub fn missing(obs: &[MissingObservation], mean: MeanSpec) -> Result<Self> {
        for (i, o) in obs.iter().enumerate() {
            o.validate(i)?;
        }
        let records = obs
            .iter()
            .map(|o| Record { y: o.y, x: o.x.unwrap_or(0.0), observed: o.r == 1, z: o.z.clone() })
            .collect();
        Self::checked(Problem::Miss, mean, records)
    }

    /// Every record treated as fully observed at its recorded `x`.
    pub fn fully_observed(y: &[f64], x: &[f64], z: &[Vec<f64>], mean: MeanSpec) -> Result<Self> {
        let records = (0..y.len())
            .map(|i| Record { y: y[i], x: x[i], observed: true, z: z[i].clone() })
            .collect();
        Self::checked(Problem::Cens, mean, records)
    }

    fn checked(problem: Problem, mean: MeanSpec, records: Vec<Record>) -> Result<Self> {
        let nz = records.first().map_or(0, |r| r.z.len());
        if let Some((i, _)) = records.iter().enumerate().find(|(_, r)| r.z.len() != nz) {
            return Err(CencovError::InvalidObservation { index: i, reason: "covariate length differs".into() });
        }
        if let MeanSpec::TimeToEvent { age_column } = mean {
            if age_column >= nz && !records.is_empty() {
                return Err(CencovError::Config(format!("age column {age_column} out of range for {nz} covariates")));
            }
        }
        Ok(Dataset { problem, mean, records })
    }

    pub fn n(&self) -> usize {
        self.records.len()
    }

    pub fn nz(&self) -> usize {
        self.records.first().map_or(0, |r| r.z.len())
    }

    pub fn theta_dim(&self) -> usize {
        self.mean.theta_dim(self.nz())
    }

    pub fn n_observed(&self) -> usize {
        self.records.iter().filter(|r| r.observed).count()
    }

    /// The records as censored observations (`w = x`, `delta = observed`).
    pub fn as_censored(&self) -> Vec<CensoredObservation> {
        self.records
            .iter()
            .map(|r| CensoredObservation { y: r.y, w: r.x, delta: r.observed as u8, z: r.z.clone() })
            .collect()
    }
}

/// Ordinary least squares on complete records, with `sigma` from the residual mean square.
pub fn complete_case_least_squares(data: &Dataset) -> Result<Theta> {
    let rows: Vec<&Record> = data.records.iter().filter(|r| r.observed).collect();
    let p = data.theta_dim();
    let q = p - 1;
    if rows.len() < q {
        return Err(CencovError::Config(format!("{} complete records are too few for {q} coefficients", rows.len())));
    }
    let mut xm = DMatrix::zeros(rows.len(), q);
    let mut yv = DVector::zeros(rows.len());
    for (i, r) in rows.iter().enumerate() {
        let lp_unit = |beta: &[f64]| {
            let lp = data.mean.linear_parts(beta, &r.z);
            lp.c0 - lp.k * r.x
        };
        for j in 0..q {
            let mut e = vec![0.0; q];
            e[j] = 1.0;
            xm[(i, j)] = lp_unit(&e);
        }
        yv[i] = r.y;
    }
    let xtx = xm.transpose() * &xm;
    let coef = xtx.lu().solve(&(xm.transpose() * &yv)).ok_or(CencovError::Singular("least-squares start"))?;
    let resid = &yv - &xm * &coef;
    let sigma = (resid.norm_squared() / rows.len() as f64).sqrt().max(1e-6);
    Ok(Theta { beta: coef.iter().copied().collect(), sigma })
}

/// Per-record probabilities replacing the model ones.
pub fn injected_uniform_pi(n: usize, lo: f64, hi: f64, seed: u64, stream: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Precomputed per-record quantities for evaluating `Phi` at any `theta`.
pub struct PhiEngine<'a> {
    pub spec: EstimatorSpec,
    data: &'a Dataset,
    pi_w: Vec<f64>,
    pi_yz: Vec<f64>,
    x_law: Vec<(f64, f64)>,
    mle_law: Vec<(f64, f64)>,
    obs_model: Option<ObservationModel>,
    lambda: Option<DMatrix<f64>>,
    pub clamp_events: usize,
}

impl<'a> PhiEngine<'a> {
    pub fn new(
        spec: EstimatorSpec,
        data: &'a Dataset,
        bundle: &NuisanceBundle,
        injected_pi: Option<&[f64]>,
        ipw_uses_pi_yz: bool,
    ) -> Result<Self> {
        spec.validate()?;
        if spec.problem != data.problem {
            return Err(CencovError::Config(format!(
                "estimator is configured for the {:?} problem but the data use the {:?} layout",
                spec.problem, data.problem
            )));
        }
        let n = data.n();
        let nz = data.nz();
        let counter = ClampCounter::new();
        if spec.probability_source == ProbabilitySource::Injected {
            match injected_pi {
                Some(v) if v.len() == n => {}
                Some(v) => {
                    return Err(CencovError::DimensionMismatch { what: "injected probabilities", expected: n, got: v.len() })
                }
                None => return Err(CencovError::MissingNuisance("injected probabilities")),
            }
        }
        let injected = injected_pi.filter(|_| spec.probability_source == ProbabilitySource::Injected);

        let obs_model = if spec.needs_pi_w() || spec.needs_pi_yz() {
            let m = match (data.problem, spec.probability_source, spec.kind) {
                (Problem::Cens, ProbabilitySource::Logistic, EstimatorKind::Acc) => None,
                (Problem::Cens, _, _) => bundle.censoring_model(spec.dependence).ok(),
                (Problem::Miss, _, _) => bundle
                    .pi_xz_logistic
                    .clone()
                    .map(|coef| ObservationModel::Logistic { coef }),
            };
            if let Some(m) = &m {
                m.check(nz)?;
                if data.problem == Problem::Miss && spec.dependence == Dependence::Ind && !m.is_constant_in_x() {
                    return Err(CencovError::Config(
                        "independent missingness requires a zero x-coefficient in the observation model".into(),
                    ));
                }
            }
            m
        } else {
            None
        };

        let x_dist = if spec.needs_x_law() { Some(bundle.x_given_z()?) } else { None };
        if let Some(x) = x_dist {
            x.validate()?;
            x.check_len("x_given_z slopes", nz)?;
        }
        let x_law: Vec<(f64, f64)> = match x_dist {
            Some(x) => data.records.iter().map(|r| (x.mean(&r.z), x.sd)).collect(),
            None => Vec::new(),
        };

        let mle_law = if spec.kind == EstimatorKind::Mle {
            data.records
                .iter()
                .enumerate()
                .map(|(i, r)| {
                    if r.observed {
                        Ok((0.0, 1.0))
                    } else if data.problem == Problem::Cens && spec.dependence == Dependence::Dep {
                        bundle.x_given_cz(r.x, &r.z)
                    } else {
                        Ok(x_law[i])
                    }
                })
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };

        let pi_yz = if spec.needs_pi_yz() || ipw_uses_pi_yz {
            if let Some(v) = injected.filter(|_| spec.needs_pi_yz()) {
                v.iter().map(|&p| clamp_probability(p, Some(&counter))).collect()
            } else {
                compute_pi_yz(&spec, data, bundle, obs_model.as_ref(), &counter)?
            }
        } else {
            Vec::new()
        };

        let pi_w = if spec.needs_pi_w() {
            if let Some(v) = injected {
                v.iter().map(|&p| clamp_probability(p, Some(&counter))).collect()
            } else if ipw_uses_pi_yz {
                pi_yz.clone()
            } else {
                let m = obs_model.as_ref().ok_or(match data.problem {
                    Problem::Cens => CencovError::MissingNuisance("c_given_z"),
                    Problem::Miss => CencovError::MissingNuisance("pi_xz_logistic"),
                })?;
                data.records
                    .iter()
                    .map(|r| if r.observed { m.prob(r.x, &r.z, Some(&counter)) } else { 1.0 })
                    .collect()
            }
        } else {
            Vec::new()
        };

        if spec.psi_mode == PsiMode::Effective && spec.aug_kind().is_some() && obs_model.is_none() {
            return Err(CencovError::MissingNuisance("observation model for the effective Psi"));
        }

        let clamp_events = counter.get();
        Ok(PhiEngine { spec, data, pi_w, pi_yz, x_law, mle_law, obs_model, lambda: None, clamp_events })
    }

    pub fn with_lambda(mut self, lambda: Option<DMatrix<f64>>) -> Self {
        self.lambda = lambda;
        self
    }

    pub fn lambda(&self) -> Option<&DMatrix<f64>> {
        self.lambda.as_ref()
    }

    pub fn n(&self) -> usize {
        self.data.n()
    }

    pub fn dim(&self) -> usize {
        self.data.theta_dim()
    }

    pub fn pi_yz(&self) -> &[f64] {
        &self.pi_yz
    }

    pub fn pi_w(&self) -> &[f64] {
        &self.pi_w
    }

    /// Augmentation vector `Psi(y_i, z_i; theta)` before any projection.
    fn psi_into(&self, beta: &[f64], sigma: f64, i: usize, out: &mut [f64]) -> Result<()> {
        let r = &self.data.records[i];
        let (mu, sd) = self.x_law[i];
        match self.spec.psi_mode {
            PsiMode::Closed => {
                let pd = decompose_at(beta, sigma, r.y, &r.z, mu, sd, self.data.mean);
                expected_score_into(beta, sigma, &r.z, &pd, self.data.mean, out);
                out.iter_mut().for_each(|v| *v = -*v);
                Ok(())
            }
            PsiMode::Effective => {
                let model = self.obs_model.as_ref().ok_or(CencovError::MissingNuisance("observation model"))?;
                let kind = self.spec.aug_kind().expect("augmented estimator");
                psi_effective_at(kind, beta, sigma, r.y, &r.z, mu, sd, model, self.data.mean, default_rule(), None, out)
            }
        }
    }

    /// Splits `Phi_i` into its base term, the scalar augmentation factor and `Psi`.
    /// `base` and `psi` have length `p`; `psi` is left untouched when the factor is zero.
    pub fn parts_into(&self, theta: &[f64], i: usize, base: &mut [f64], psi: &mut [f64]) -> Result<f64> {
        let p = theta.len();
        let beta = &theta[..p - 1];
        let sigma = theta[p - 1];
        let r = &self.data.records[i];
        let mean = self.data.mean;
        let obs = r.observed as u8 as f64;
        if r.observed {
            score_into(beta, sigma, r.y, r.x, &r.z, mean, base);
        } else {
            base.iter_mut().for_each(|v| *v = 0.0);
        }
        let factor = match self.spec.kind {
            EstimatorKind::Cc => 0.0,
            EstimatorKind::Ipw => {
                if r.observed {
                    base.iter_mut().for_each(|v| *v /= self.pi_w[i]);
                }
                0.0
            }
            EstimatorKind::Mle => {
                if !r.observed {
                    let (mu, sd) = self.mle_law[i];
                    let w = if self.data.problem == Problem::Cens { r.x } else { f64::NEG_INFINITY };
                    mle_gradient(beta, sigma, r.y, w, &r.z, mu, sd, mean, base);
                }
                0.0
            }
            EstimatorKind::Acc => obs - self.pi_yz[i],
            EstimatorKind::Macc => 1.0 - obs / self.pi_w[i],
            EstimatorKind::Aipw => {
                if r.observed {
                    base.iter_mut().for_each(|v| *v /= self.pi_w[i]);
                }
                1.0 - obs / self.pi_w[i]
            }
        };
        if factor != 0.0 {
            self.psi_into(beta, sigma, i, psi)?;
        }
        Ok(factor)
    }

    /// `Phi_i(theta)` written into `out`.
    pub fn phi_into(&self, theta: &[f64], i: usize, out: &mut [f64], psi: &mut [f64]) -> Result<()> {
        let factor = self.parts_into(theta, i, out, psi)?;
        if factor != 0.0 {
            match &self.lambda {
                Some(l) => {
                    for a in 0..out.len() {
                        let mut s = 0.0;
                        for b in 0..psi.len() {
                            s += l[(a, b)] * psi[b];
                        }
                        out[a] += factor * s;
                    }
                }
                None => out.iter_mut().zip(psi.iter()).for_each(|(o, v)| *o += factor * v),
            }
        }
        Ok(())
    }

    pub fn phi_i(&self, theta: &[f64], i: usize) -> Result<Vec<f64>> {
        let mut out = vec![0.0; theta.len()];
        let mut psi = vec![0.0; theta.len()];
        self.phi_into(theta, i, &mut out, &mut psi)?;
        Ok(out)
    }

    /// Per-observation mean of `Phi` at `theta`.
    pub fn phi_mean(&self, theta: &[f64]) -> Result<Vec<f64>> {
        let p = theta.len();
        let mut acc = vec![0.0; p];
        let mut out = vec![0.0; p];
        let mut psi = vec![0.0; p];
        for i in 0..self.n() {
            self.phi_into(theta, i, &mut out, &mut psi)?;
            acc.iter_mut().zip(&out).for_each(|(a, v)| *a += v);
        }
        let n = self.n() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        Ok(acc)
    }

    pub fn phi_all(&self, theta: &[f64]) -> Result<Vec<Vec<f64>>> {
        (0..self.n()).map(|i| self.phi_i(theta, i)).collect()
    }

    /// Mean of `(base_i, factor_i * Psi_i)` stacked as a `2p` vector.
    fn base_and_aug_mean(&self, theta: &[f64]) -> Result<Vec<f64>> {
        let p = theta.len();
        let mut acc = vec![0.0; 2 * p];
        let mut base = vec![0.0; p];
        let mut psi = vec![0.0; p];
        for i in 0..self.n() {
            let f = self.parts_into(theta, i, &mut base, &mut psi)?;
            for j in 0..p {
                acc[j] += base[j];
                if f != 0.0 {
                    acc[p + j] += f * psi[j];
                }
            }
        }
        let n = self.n() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        Ok(acc)
    }
}

/// Gradient of the censored marginal log-likelihood in `theta` by a five-point stencil.
#[allow(clippy::too_many_arguments)]
pub(crate) fn mle_gradient(beta: &[f64], sigma: f64, y: f64, w: f64, z: &[f64], mu: f64, sd: f64, mean: MeanSpec, out: &mut [f64]) {
    let p = beta.len() + 1;
    let mut th: Vec<f64> = beta.to_vec();
    th.push(sigma);
    let eval = |t: &[f64]| censored_loglik_at(&t[..p - 1], t[p - 1], y, w, z, mu, sd, mean);
    for j in 0..p {
        let mut h = 1e-3 * (1.0 + th[j].abs());
        if j == p - 1 {
            h = h.min(0.25 * sigma);
        }
        let x0 = th[j];
        let mut at = |d: f64| {
            th[j] = x0 + d;
            let v = eval(&th);
            th[j] = x0;
            v
        };
        let f2 = at(2.0 * h);
        let f1 = at(h);
        let m1 = at(-h);
        let m2 = at(-2.0 * h);
        out[j] = (-f2 + 8.0 * f1 - 8.0 * m1 + m2) / (12.0 * h);
    }
}

fn compute_pi_yz(
    spec: &EstimatorSpec,
    data: &Dataset,
    bundle: &NuisanceBundle,
    obs_model: Option<&ObservationModel>,
    counter: &ClampCounter,
) -> Result<Vec<f64>> {
    match spec.probability_source {
        ProbabilitySource::Logistic => {
            let kappa = bundle.kappa.as_ref().ok_or(CencovError::MissingNuisance("kappa"))?;
            if kappa.len() != data.nz() + 2 {
                return Err(CencovError::DimensionMismatch {
                    what: "kappa over (1, y, z)",
                    expected: data.nz() + 2,
                    got: kappa.len(),
                });
            }
            Ok(data
                .records
                .iter()
                .map(|r| {
                    let eta = kappa[0] + kappa[1] * r.y + kappa[2..].iter().zip(&r.z).map(|(c, v)| c * v).sum::<f64>();
                    clamp_probability(logistic(eta), Some(counter))
                })
                .collect())
        }
        _ => {
            let model = obs_model.ok_or(match data.problem {
                Problem::Cens => CencovError::MissingNuisance("c_given_z"),
                Problem::Miss => CencovError::MissingNuisance("pi_xz_logistic"),
            })?;
            if model.is_constant_in_x() {
                return Ok(data.records.iter().map(|r| model.prob(0.0, &r.z, Some(counter))).collect());
            }
            let th = bundle.pi_theta.as_ref().ok_or(CencovError::MissingNuisance("pi_theta"))?;
            data.mean.check(th, data.records.first().map_or(&[][..], |r| &r.z))?;
            let x = bundle.x_given_z()?;
            Ok(data
                .records
                .iter()
                .map(|r| {
                    prob_observed_yz_at(&th.beta, th.sigma, r.y, &r.z, x.mean(&r.z), x.sd, model, data.mean, Some(counter))
                })
                .collect())
        }
    }
}

/// Scalar `Phi_i` for one record, building the per-record quantities on the fly.
pub fn phi_contribution(
    spec: EstimatorSpec,
    record: &Record,
    problem: Problem,
    mean: MeanSpec,
    theta: &Theta,
    nuisance: &NuisanceBundle,
    lambda: Option<&DMatrix<f64>>,
) -> Result<Vec<f64>> {
    let data = Dataset::checked(problem, mean, vec![record.clone()])?;
    mean.check(theta, &record.z)?;
    let engine = PhiEngine::new(spec, &data, nuisance, None, false)?.with_lambda(lambda.cloned());
    engine.phi_i(&theta.to_vec(), 0)
}

/// Inverse of the augmentation outer moment, or its spectral pseudo-inverse when some
/// combination of the augmentation components vanishes identically (for instance the
/// closed-form `Psi` under a linear-in-x mean with a Gaussian x-law spans only `p - 1`
/// directions).
fn invert_outer(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let p = m.nrows();
    let eig = m.clone().symmetric_eigen();
    let top = eig.eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if !(top > 0.0 && top.is_finite()) {
        return Err(CencovError::Singular("augmentation outer moment"));
    }
    let cutoff = 1e-10 * top;
    let mut inv = DMatrix::zeros(p, p);
    let mut dropped = 0;
    for (k, &lam) in eig.eigenvalues.iter().enumerate() {
        if lam > cutoff {
            let v = eig.eigenvectors.column(k);
            inv += (v * v.transpose()) / lam;
        } else {
            dropped += 1;
        }
    }
    if dropped > 0 {
        log::debug!("projection: outer moment has {dropped} null direction(s), using pseudo-inverse");
    }
    Ok(inv)
}

/// Influence adjustment for estimated nuisance parameters used inside the projection.
pub struct NuisanceAdjustment<'b> {
    pub estimates: &'b NuisanceEstimates,
    pub bundle: &'b NuisanceBundle,
    pub injected_pi: Option<&'b [f64]>,
    pub ipw_uses_pi_yz: bool,
}

/// `Lambda = -E[base g'] E[g g']^{-1}` with `g = factor * Psi`, evaluated at the pilot value.
pub fn estimate_lambda(engine: &PhiEngine<'_>, theta_pilot: &[f64], adjust: Option<&NuisanceAdjustment<'_>>) -> Result<DMatrix<f64>> {
    let p = theta_pilot.len();
    let n = engine.n();
    let mut bases = Vec::with_capacity(n);
    let mut gs = Vec::with_capacity(n);
    let mut base = vec![0.0; p];
    let mut psi = vec![0.0; p];
    for i in 0..n {
        let f = engine.parts_into(theta_pilot, i, &mut base, &mut psi)?;
        bases.push(DVector::from_column_slice(&base));
        gs.push(if f != 0.0 { DVector::from_iterator(p, psi.iter().map(|v| f * v)) } else { DVector::zeros(p) });
    }
    if let Some(adj) = adjust {
        let nu0 = adj.estimates.params();
        let q = nu0.len();
        let h = relative_steps(&nu0, 1e-5);
        let jac = numeric_jacobian(
            |nu| {
                let b = adj.estimates.apply(adj.bundle, nu);
                let e = PhiEngine::new(engine.spec, engine.data, &b, adj.injected_pi, adj.ipw_uses_pi_yz)?;
                e.base_and_aug_mean(theta_pilot)
            },
            &nu0,
            &h,
        )?;
        let d_base = jac.rows(0, p).into_owned();
        let d_aug = jac.rows(p, p).into_owned();
        let jnu = adj.estimates.mean_score_jacobian(n);
        let jnu_inv = jnu.clone().lu().try_inverse().ok_or(CencovError::Singular("nuisance information"))?;
        let scores = adj.estimates.scores(n);
        for i in 0..n {
            let s = DVector::from_column_slice(&scores[i]);
            let ups: DVector<f64> = -(&jnu_inv * s);
            debug_assert_eq!(ups.len(), q);
            bases[i] += &d_base * &ups;
            gs[i] += &d_aug * &ups;
        }
    }
    let mut cross = DMatrix::zeros(p, p);
    let mut outer = DMatrix::zeros(p, p);
    for (b, g) in bases.iter().zip(&gs) {
        cross += b * g.transpose();
        outer += g * g.transpose();
    }
    cross /= n as f64;
    outer /= n as f64;
    let inv = invert_outer(&outer)?;
    Ok(-cross * inv)
}

/// How the nuisance blocks are obtained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum NuisanceConfig {
    /// Use the supplied blocks as the true values.
    Known { bundle: NuisanceBundle },
    /// Fit the blocks the estimator needs from the data.
    Estimate {
        /// Covariate columns entering the nuisance means; defaults to all except the age column.
        #[serde(default)]
        cols: Option<Vec<usize>>,
        /// Known `Cov(X, C | Z)` required under dependent censoring.
        #[serde(default)]
        cov_xc_given_z: f64,
        /// Blocks that stay fixed (for example a dependent-missingness logistic model).
        #[serde(default)]
        fixed: NuisanceBundle,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[derive(Default)]
pub struct FitOptions {
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub injectors: Vec<MisspecInjector>,
    /// Seed for the injected-probability stream.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub stream: u64,
}


#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub theta_hat: Theta,
    /// Sandwich covariance (nuisance-corrected when nuisance blocks were estimated).
    pub covariance: Vec<Vec<f64>>,
    pub se: Vec<f64>,
    /// Standard errors that treat estimated nuisance blocks as known.
    pub se_uncorrected: Vec<f64>,
    pub lambda: Option<Vec<Vec<f64>>>,
    pub converged: bool,
    pub iterations: usize,
    pub residual: f64,
    pub clamp_events: usize,
    pub bread_condition: f64,
    pub nuisance: NuisanceBundle,
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn default_cols(data: &Dataset) -> Vec<usize> {
    let skip = match data.mean {
        MeanSpec::TimeToEvent { age_column } => Some(age_column),
        MeanSpec::LinearX => None,
    };
    (0..data.nz()).filter(|&j| Some(j) != skip).collect()
}

/// Fits whatever nuisance blocks `spec` needs.
fn estimate_nuisance(
    spec: &EstimatorSpec,
    data: &Dataset,
    cols: &[usize],
    cov_xc: f64,
    fixed: &NuisanceBundle,
) -> Result<(NuisanceBundle, NuisanceEstimates)> {
    let mut bundle = fixed.clone();
    let mut est = NuisanceEstimates::default();
    let cens = data.as_censored();
    let needs_prob_model = spec.needs_pi_w()
        || (spec.needs_pi_yz() && spec.probability_source == ProbabilitySource::Analytic)
        || (spec.aug_kind().is_some() && spec.psi_mode == PsiMode::Effective);
    match data.problem {
        Problem::Cens => {
            let needs_x = spec.needs_x_law() && fixed.x_given_z.is_none();
            let needs_c = needs_prob_model
                && spec.probability_source != ProbabilitySource::Injected
                && fixed.c_given_z.is_none()
                && fixed.c_given_xz.is_none();
            if needs_x || needs_c {
                let a = fit_alpha(&cens, spec.dependence, cov_xc, cols)?;
                bundle.x_given_z = a.x_given_z.clone().or(bundle.x_given_z);
                bundle.c_given_z = a.c_given_z.clone().or(bundle.c_given_z);
                bundle.c_given_xz = None;
                bundle.cov_xc_given_z = a.layout.cov_xc_given_z;
                bundle.provenance.x_given_z = BlockSource::Estimated;
                bundle.provenance.c_dist = BlockSource::Estimated;
                est.alpha = Some(a);
            }
        }
        Problem::Miss => {
            if spec.needs_x_law() && fixed.x_given_z.is_none() {
                let a = fit_x_given_z_complete_cases(&cens, cols)?;
                bundle.x_given_z = a.x_given_z.clone();
                bundle.provenance.x_given_z = BlockSource::Estimated;
                est.alpha = Some(a);
            }
            if needs_prob_model && spec.dependence == Dependence::Ind && bundle.pi_xz_logistic.is_none() {
                let ind: Vec<u8> = data.records.iter().map(|r| r.observed as u8).collect();
                let z: Vec<Vec<f64>> = data.records.iter().map(|r| r.z.clone()).collect();
                let fit = fit_logistic_pi_z(&ind, &z)?;
                bundle.pi_xz_logistic = Some(fit.coef.clone());
                bundle.provenance.pi_xz_logistic = BlockSource::Estimated;
                est.logistic = Some((LogisticTarget::PiZ, fit));
            }
        }
    }
    if spec.needs_pi_yz() && spec.probability_source == ProbabilitySource::Logistic {
        let ind: Vec<u8> = data.records.iter().map(|r| r.observed as u8).collect();
        let y: Vec<f64> = data.records.iter().map(|r| r.y).collect();
        let z: Vec<Vec<f64>> = data.records.iter().map(|r| r.z.clone()).collect();
        let fit = fit_logistic_kappa(&ind, &y, &z)?;
        bundle.kappa = Some(fit.coef.clone());
        bundle.provenance.kappa = BlockSource::Estimated;
        est.logistic = Some((LogisticTarget::Kappa, fit));
    }
    Ok((bundle, est))
}

fn solve_engine(engine: &PhiEngine<'_>, start: &[f64], cfg: &SolverConfig) -> Result<crate::numerics::SolveOutcome> {
    let p = start.len();
    solve_estimating_equation(|t| engine.phi_mean(t), start, &[p - 1], cfg)
}

/// Full pipeline: nuisance blocks, pilot fit, optional projection matrix, final solve and
/// sandwich covariance.
pub fn fit_estimator(spec: EstimatorSpec, data: &Dataset, nuisance: &NuisanceConfig, opts: &FitOptions) -> Result<FitResult> {
    spec.validate()?;
    if data.n() == 0 || data.n_observed() == 0 {
        return Err(CencovError::Config("at least one complete record is required".into()));
    }
    for inj in &opts.injectors {
        inj.validate()?;
    }
    let mut spec = spec;
    let uniform = opts.injectors.iter().find_map(|i| match i {
        MisspecInjector::UniformPi { lo, hi } => Some((*lo, *hi)),
        _ => None,
    });
    if uniform.is_some() {
        spec.probability_source = ProbabilitySource::Injected;
    }
    let ipw_uses_pi_yz = opts.injectors.contains(&MisspecInjector::UsePiYzInIpw);
    let wrong_x = opts.injectors.iter().find_map(|i| match i {
        MisspecInjector::WrongXDist { mean, sd, keep_slopes } => Some((*mean, *sd, *keep_slopes)),
        _ => None,
    });

    let (mut bundle, estimates) = match nuisance {
        NuisanceConfig::Known { bundle } => (bundle.clone(), NuisanceEstimates::default()),
        NuisanceConfig::Estimate { cols, cov_xc_given_z, fixed } => {
            let cols = cols.clone().unwrap_or_else(|| default_cols(data));
            estimate_nuisance(&spec, data, &cols, *cov_xc_given_z, fixed).map_err(|e| e.at_stage("nuisance estimation"))?
        }
    };
    if spec.lambda_mode == LambdaMode::NuisanceAdjusted && estimates.is_empty() {
        return Err(CencovError::Config("nuisance-adjusted projection requires estimated nuisance blocks".into()));
    }
    if let Some((m, sd, keep_slopes)) = wrong_x {
        let base = bundle.x_given_z.clone();
        let slopes = match (&base, keep_slopes) {
            (Some(b), true) => b.slopes.clone(),
            _ => vec![0.0; data.nz()],
        };
        let sd = sd.or(base.map(|b| b.sd)).unwrap_or(1.0);
        bundle.x_override = Some(GaussianConditional { intercept: m, slopes, sd });
        bundle.provenance.x_given_z = BlockSource::Misspecified("wrong_x_dist".into());
    }
    let injected = uniform.map(|(lo, hi)| injected_uniform_pi(data.n(), lo, hi, opts.seed, opts.stream));
    let injected_ref = injected.as_deref();

    let start = complete_case_least_squares(data)?.to_vec();
    let cc_engine = PhiEngine::new(EstimatorSpec::new(EstimatorKind::Cc).with_problem(data.problem), data, &bundle, None, false)?;
    let cc = solve_engine(&cc_engine, &start, &opts.solver).map_err(|e| e.at_stage("complete-case pilot"))?;
    if bundle.pi_theta.is_none() {
        bundle.pi_theta = Some(Theta::from_slice(&cc.x));
    }

    let mut pilot = cc.x.clone();
    let engine = PhiEngine::new(spec, data, &bundle, injected_ref, ipw_uses_pi_yz)?;
    if spec.kind == EstimatorKind::Aipw {
        let mut ipw_spec = spec;
        ipw_spec.kind = EstimatorKind::Ipw;
        ipw_spec.lambda_mode = LambdaMode::None;
        let ipw = PhiEngine::new(ipw_spec, data, &bundle, injected_ref, ipw_uses_pi_yz)?;
        pilot = solve_engine(&ipw, &pilot, &opts.solver).map_err(|e| e.at_stage("IPW pilot"))?.x;
    }

    let lambda = match spec.lambda_mode {
        LambdaMode::None => None,
        LambdaMode::Plain => Some(estimate_lambda(&engine, &pilot, None).map_err(|e| e.at_stage("projection matrix"))?),
        LambdaMode::NuisanceAdjusted => {
            let adj = NuisanceAdjustment { estimates: &estimates, bundle: &bundle, injected_pi: injected_ref, ipw_uses_pi_yz };
            Some(estimate_lambda(&engine, &pilot, Some(&adj)).map_err(|e| e.at_stage("projection matrix"))?)
        }
    };
    let engine = engine.with_lambda(lambda.clone());

    let (theta_hat, converged, iterations, residual) = if spec.kind == EstimatorKind::Cc {
        (cc.x.clone(), true, cc.iterations, cc.residual)
    } else {
        match solve_engine(&engine, &pilot, &opts.solver) {
            Ok(o) => (o.x, true, o.iterations, o.residual),
            Err(CencovError::NonConvergence { iterations, residual, last }) => (last, false, iterations, residual),
            Err(e) => return Err(e.at_stage("final solve")),
        }
    };

    let correction = if estimates.is_empty() {
        None
    } else {
        Some(nuisance_correction(&engine, &theta_hat, &estimates, &bundle, injected_ref, ipw_uses_pi_yz)?)
    };
    let parts = sandwich_parts(&engine, &theta_hat, correction.as_ref(), &opts.solver);
    let (cov, se, se_unc, cond) = match parts {
        Ok(SandwichParts { covariance, covariance_uncorrected, condition, .. }) => {
            let se = covariance.diagonal().iter().map(|v| v.max(0.0).sqrt()).collect();
            let se_u = covariance_uncorrected.diagonal().iter().map(|v| v.max(0.0).sqrt()).collect();
            (covariance, se, se_u, condition)
        }
        Err(e) if !converged => {
            log::warn!("sandwich unavailable after non-convergence: {e}");
            let p = theta_hat.len();
            (DMatrix::from_element(p, p, f64::NAN), vec![f64::NAN; p], vec![f64::NAN; p], f64::NAN)
        }
        Err(e) => return Err(e.at_stage("sandwich variance")),
    };

    Ok(FitResult {
        theta_hat: Theta::from_slice(&theta_hat),
        covariance: matrix_rows(&cov),
        se,
        se_uncorrected: se_unc,
        lambda: lambda.as_ref().map(matrix_rows),
        converged,
        iterations,
        residual,
        clamp_events: engine.clamp_events,
        bread_condition: cond,
        nuisance: bundle,
    })
}

/// Derivative pieces for the nuisance-corrected meat.
pub fn nuisance_correction(
    engine: &PhiEngine<'_>,
    theta: &[f64],
    estimates: &NuisanceEstimates,
    bundle: &NuisanceBundle,
    injected_pi: Option<&[f64]>,
    ipw_uses_pi_yz: bool,
) -> Result<NuisanceCorrection> {
    let nu0 = estimates.params();
    let h = relative_steps(&nu0, 1e-5);
    let lambda = engine.lambda().cloned();
    let d_phi_d_nu = numeric_jacobian(
        |nu| {
            let b = estimates.apply(bundle, nu);
            let e = PhiEngine::new(engine.spec, engine.data, &b, injected_pi, ipw_uses_pi_yz)?.with_lambda(lambda.clone());
            e.phi_mean(theta)
        },
        &nu0,
        &h,
    )?;
    Ok(NuisanceCorrection {
        d_phi_d_nu,
        d_score_d_nu: estimates.mean_score_jacobian(engine.n()),
        scores: estimates.scores(engine.n()),
    })
}
