//! Nuisance distributions: the joint Gaussian law of `(X, C) | Z`, logistic models for the
//! observation probability, and the misspecification injectors used in simulations.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::closed_forms::{logistic, Dependence, GaussianConditional, ObservationModel};
use crate::error::{CencovError, Result};
use crate::model::{CensoredObservation, Theta};
use crate::numerics::normal::{log_normal_upper_tail, normal_pdf};
use crate::numerics::solver::{numeric_jacobian, relative_steps, solve_estimating_equation, SolverConfig};

/// Where a nuisance block came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BlockSource {
    #[default]
    Known,
    Estimated,
    Misspecified(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Provenance {
    pub x_given_z: BlockSource,
    pub c_dist: BlockSource,
    pub kappa: BlockSource,
    pub pi_xz_logistic: BlockSource,
}

/// All nuisance pieces an estimator may consult.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct NuisanceBundle {
    /// `X | Z`, slopes over the full covariate vector.
    pub x_given_z: Option<GaussianConditional>,
    /// Marginal `C | Z`, slopes over the full covariate vector.
    pub c_given_z: Option<GaussianConditional>,
    /// Explicit `C | X, Z` (first slope on `x`); derived from the other blocks when absent.
    pub c_given_xz: Option<GaussianConditional>,
    /// `Cov(X, C | Z)`, zero under independent censoring.
    #[serde(default)]
    pub cov_xc_given_z: f64,
    /// Logistic coefficients over `(1, y, z)` for `Pr(observed | Y, Z)`.
    pub kappa: Option<Vec<f64>>,
    /// Logistic coefficients over `(1, x, z)` for the missing-covariate problem.
    pub pi_xz_logistic: Option<Vec<f64>>,
    /// Parameter value at which analytic `pi_{Y,Z}` is evaluated.
    pub pi_theta: Option<Theta>,
    /// Replacement x-law used by the likelihood and Psi (misspecification).
    pub x_override: Option<GaussianConditional>,
    #[serde(default)]
    pub provenance: Provenance,
}

impl NuisanceBundle {
    pub fn x_given_z(&self) -> Result<&GaussianConditional> {
        self.x_override
            .as_ref()
            .or(self.x_given_z.as_ref())
            .ok_or(CencovError::MissingNuisance("x_given_z"))
    }

    /// Law of `C | X, Z` with the first slope on `x`.
    pub fn c_given_xz(&self) -> Result<GaussianConditional> {
        if let Some(c) = &self.c_given_xz {
            return Ok(c.clone());
        }
        let c = self.c_given_z.as_ref().ok_or(CencovError::MissingNuisance("c_given_z"))?;
        let x = self.x_given_z.as_ref().ok_or(CencovError::MissingNuisance("x_given_z"))?;
        let s = self.cov_xc_given_z;
        let rho = s / (x.sd * x.sd);
        let var = c.sd * c.sd - s * rho;
        if !(var > 0.0) {
            return Err(CencovError::InvalidParameter(
                "conditional covariance of (X, C) exceeds the marginal variances".into(),
            ));
        }
        let mut slopes = vec![rho];
        slopes.extend(c.slopes.iter().zip(&x.slopes).map(|(ec, gx)| ec - rho * gx));
        Ok(GaussianConditional { intercept: c.intercept - rho * x.intercept, slopes, sd: var.sqrt() })
    }

    /// Mean and sd of `X | C = w, Z = z`.
    pub fn x_given_cz(&self, w: f64, z: &[f64]) -> Result<(f64, f64)> {
        if let Some(o) = &self.x_override {
            return Ok((o.mean(z), o.sd));
        }
        let x = self.x_given_z.as_ref().ok_or(CencovError::MissingNuisance("x_given_z"))?;
        let c = self.c_given_z.as_ref().ok_or(CencovError::MissingNuisance("c_given_z"))?;
        let s = self.cov_xc_given_z;
        let vc = c.sd * c.sd;
        let var = x.sd * x.sd - s * s / vc;
        if !(var > 0.0) {
            return Err(CencovError::InvalidParameter("degenerate X | C, Z law".into()));
        }
        Ok((x.mean(z) + s / vc * (w - c.mean(z)), var.sqrt()))
    }

    /// Censoring-based observation model for the given dependence.
    pub fn censoring_model(&self, dependence: Dependence) -> Result<ObservationModel> {
        let c_dist = match dependence {
            Dependence::Ind => self.c_given_z.clone().ok_or(CencovError::MissingNuisance("c_given_z"))?,
            Dependence::Dep => self.c_given_xz()?,
        };
        Ok(ObservationModel::Censoring { c_dist, dependence })
    }
}

/// Ways to break a correctly specified nuisance setup on purpose.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum MisspecInjector {
    /// Record-level probabilities replaced by independent `Uniform(lo, hi)` draws.
    UniformPi {
        #[serde(default = "default_lo")]
        lo: f64,
        #[serde(default = "default_hi")]
        hi: f64,
    },
    /// x-law with its intercept replaced by `mean`. Slopes and residual sd stay at the
    /// supplied law unless `keep_slopes` is false (slopes zeroed) or `sd` is given.
    WrongXDist {
        #[serde(default = "default_wrong_mean")]
        mean: f64,
        #[serde(default)]
        sd: Option<f64>,
        #[serde(default = "default_true")]
        keep_slopes: bool,
    },
    /// IPW weights taken from `pi_{Y,Z}` instead of `pi_{X,Z}`.
    UsePiYzInIpw,
}

fn default_lo() -> f64 {
    0.1
}
fn default_hi() -> f64 {
    0.9
}
fn default_wrong_mean() -> f64 {
    -2.0
}
fn default_true() -> bool {
    true
}

impl MisspecInjector {
    pub fn validate(&self) -> Result<()> {
        match self {
            MisspecInjector::UniformPi { lo, hi } => {
                if !(0.0 < *lo && lo < hi && *hi < 1.0) {
                    return Err(CencovError::Config(format!("uniform_pi needs 0 < lo < hi < 1, got ({lo}, {hi})")));
                }
            }
            MisspecInjector::WrongXDist { sd: Some(sd), .. } => {
                if !(*sd > 0.0) {
                    return Err(CencovError::Config("wrong_x_dist sd must be positive".into()));
                }
            }
            MisspecInjector::WrongXDist { .. } | MisspecInjector::UsePiYzInIpw => {}
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Joint Gaussian MLE for (X, C) | Z.

/// Which blocks of the `(X, C) | Z` law carry free parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaLayout {
    pub cols: Vec<usize>,
    pub nz: usize,
    pub x_block: bool,
    pub c_block: bool,
    pub dependence: Dependence,
    pub cov_xc_given_z: f64,
}

impl AlphaLayout {
    fn block_len(&self) -> usize {
        self.cols.len() + 2
    }

    pub fn dim(&self) -> usize {
        self.block_len() * (self.x_block as usize + self.c_block as usize)
    }

    fn unpack_block(&self, p: &[f64]) -> GaussianConditional {
        let mut slopes = vec![0.0; self.nz];
        for (k, &c) in self.cols.iter().enumerate() {
            slopes[c] = p[1 + k];
        }
        GaussianConditional { intercept: p[0], slopes, sd: p[self.cols.len() + 1] }
    }

    /// Splits a parameter vector into the `X | Z` and `C | Z` laws.
    pub fn unpack(&self, p: &[f64]) -> (Option<GaussianConditional>, Option<GaussianConditional>) {
        let b = self.block_len();
        let mut off = 0;
        let x = self.x_block.then(|| {
            off += b;
            self.unpack_block(&p[..b])
        });
        let c = self.c_block.then(|| self.unpack_block(&p[off..off + b]));
        (x, c)
    }

    fn sd_indices(&self) -> Vec<usize> {
        let b = self.block_len();
        let n = self.x_block as usize + self.c_block as usize;
        (0..n).map(|k| k * b + b - 1).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlphaFit {
    pub params: Vec<f64>,
    pub layout: AlphaLayout,
    pub x_given_z: Option<GaussianConditional>,
    pub c_given_z: Option<GaussianConditional>,
    /// Per-record score vectors at the estimate.
    pub scores: Vec<Vec<f64>>,
    /// Observed information (sum over records).
    pub info: DMatrix<f64>,
    pub loglik: f64,
    pub iterations: usize,
}

struct Law {
    mean: f64,
    sd: f64,
}

fn law(p: &[f64], cols: &[usize], z: &[f64]) -> Law {
    let mean = p[0] + cols.iter().enumerate().map(|(k, &c)| p[1 + k] * z[c]).sum::<f64>();
    Law { mean, sd: p[cols.len() + 1] }
}

fn inverse_mills(u: f64) -> f64 {
    (normal_pdf(u).ln() - log_normal_upper_tail(u)).exp()
}

/// Log-likelihood of one record and its gradient with respect to one observed law `o` and
/// one right-truncated law `t` (observed value `w` for `o`, survival beyond `w` for `t`).
/// The gradient layout is `[d mu_o, d sd_o, d mu_t, d sd_t]`.
fn record_terms(w: f64, o: &Law, t: &Law, s: f64) -> (f64, [f64; 4]) {
    let vo = o.sd * o.sd;
    let ro = (w - o.mean) / o.sd;
    let mut ll = -0.5 * ro * ro - o.sd.ln() - 0.918_938_533_204_672_7;
    let rho = s / vo;
    let tau2 = t.sd * t.sd - s * rho;
    if !(tau2 > 0.0) || !(o.sd > 0.0) || !(t.sd > 0.0) {
        return (f64::NEG_INFINITY, [0.0; 4]);
    }
    let tau = tau2.sqrt();
    let num = w - t.mean - rho * (w - o.mean);
    let u = num / tau;
    ll += log_normal_upper_tail(u);
    let lam = inverse_mills(u);
    let d_mu_o = (w - o.mean) / vo - lam * rho / tau;
    let dnum_dso = 2.0 * s / (vo * o.sd) * (w - o.mean);
    let dtau_dso = s * s / (vo * o.sd) / tau;
    let du_dso = dnum_dso / tau - num / tau2 * dtau_dso;
    let d_sd_o = -1.0 / o.sd + (w - o.mean).powi(2) / (vo * o.sd) - lam * du_dso;
    let d_mu_t = lam / tau;
    let d_sd_t = lam * num * t.sd / (tau2 * tau);
    (ll, [d_mu_o, d_sd_o, d_mu_t, d_sd_t])
}

/// Per-record log-likelihood and score for the layout.
fn alpha_record(layout: &AlphaLayout, p: &[f64], obs: &CensoredObservation, grad: &mut [f64]) -> f64 {
    let b = layout.block_len();
    let cols = &layout.cols;
    grad.iter_mut().for_each(|g| *g = 0.0);
    let (xo, co) = match (layout.x_block, layout.c_block) {
        (true, true) => (Some(0), Some(b)),
        (true, false) => (Some(0), None),
        (false, true) => (None, Some(0)),
        (false, false) => (None, None),
    };
    let z = &obs.z;
    let w = obs.w;
    // A block that is absent only ever appears through a fixed-at-infinity survival term.
    let chain = |grad: &mut [f64], off: usize, dmu: f64, dsd: f64| {
        grad[off] += dmu;
        for (k, &c) in cols.iter().enumerate() {
            grad[off + 1 + k] += dmu * z[c];
        }
        grad[off + b - 1] += dsd;
    };
    match (obs.delta, xo, co) {
        (1, Some(xi), Some(ci)) => {
            let (ll, g) = record_terms(w, &law(&p[xi..], cols, z), &law(&p[ci..], cols, z), layout.cov_xc_given_z);
            chain(grad, xi, g[0], g[1]);
            chain(grad, ci, g[2], g[3]);
            ll
        }
        (0, Some(xi), Some(ci)) => {
            let (ll, g) = record_terms(w, &law(&p[ci..], cols, z), &law(&p[xi..], cols, z), layout.cov_xc_given_z);
            chain(grad, ci, g[0], g[1]);
            chain(grad, xi, g[2], g[3]);
            ll
        }
        (1, Some(xi), None) => {
            let l = law(&p[xi..], cols, z);
            let r = (w - l.mean) / l.sd;
            chain(grad, xi, r / l.sd, -1.0 / l.sd + r * r / l.sd);
            -0.5 * r * r - l.sd.ln() - 0.918_938_533_204_672_7
        }
        (0, None, Some(ci)) => {
            let l = law(&p[ci..], cols, z);
            let r = (w - l.mean) / l.sd;
            chain(grad, ci, r / l.sd, -1.0 / l.sd + r * r / l.sd);
            -0.5 * r * r - l.sd.ln() - 0.918_938_533_204_672_7
        }
        _ => 0.0,
    }
}

/// Per-record log-likelihood contributions and scores at `params`.
pub fn alpha_loglik_and_scores(layout: &AlphaLayout, params: &[f64], data: &[CensoredObservation]) -> (f64, Vec<Vec<f64>>) {
    let mut total = 0.0;
    let scores = data
        .iter()
        .map(|o| {
            let mut g = vec![0.0; layout.dim()];
            total += alpha_record(layout, params, o, &mut g);
            g
        })
        .collect();
    (total, scores)
}

pub fn alpha_loglik(layout: &AlphaLayout, params: &[f64], data: &[CensoredObservation]) -> f64 {
    let mut g = vec![0.0; layout.dim()];
    data.iter().map(|o| alpha_record(layout, params, o, &mut g)).sum()
}

fn mean_score(layout: &AlphaLayout, params: &[f64], data: &[CensoredObservation]) -> Vec<f64> {
    let mut acc = vec![0.0; layout.dim()];
    let mut g = vec![0.0; layout.dim()];
    for o in data {
        alpha_record(layout, params, o, &mut g);
        acc.iter_mut().zip(&g).for_each(|(a, v)| *a += v);
    }
    let n = data.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    acc
}

/// Least-squares start for one block on the records with the given indicator.
fn ols_block(data: &[CensoredObservation], cols: &[usize], pick: impl Fn(&CensoredObservation) -> bool) -> Vec<f64> {
    let rows: Vec<&CensoredObservation> = data.iter().filter(|o| pick(o)).collect();
    let q = cols.len() + 1;
    let x = DMatrix::from_fn(rows.len(), q, |i, j| if j == 0 { 1.0 } else { rows[i].z[cols[j - 1]] });
    let yv = DVector::from_iterator(rows.len(), rows.iter().map(|o| o.w));
    let xtx = x.transpose() * &x;
    let coef = xtx
        .lu()
        .solve(&(x.transpose() * &yv))
        .unwrap_or_else(|| DVector::from_fn(q, |j, _| if j == 0 { yv.mean() } else { 0.0 }));
    let resid = &yv - &x * &coef;
    let sd = (resid.norm_squared() / rows.len().max(1) as f64).sqrt().max(1e-3);
    let mut p: Vec<f64> = coef.iter().copied().collect();
    p.push(sd);
    p
}

/// Maximum likelihood for the Gaussian law of `(X, C) | Z` from `(W, Delta, Z)`.
///
/// `cols` selects the covariates the two conditional means depend on. Under `Dep` the
/// conditional covariance of `(X, C)` given `Z` must be supplied; under `Ind` it is zero.
pub fn fit_alpha(
    data: &[CensoredObservation],
    dependence: Dependence,
    known_cov_xc_given_z: f64,
    cols: &[usize],
) -> Result<AlphaFit> {
    if data.is_empty() {
        return Err(CencovError::Config("fit_alpha needs at least one record".into()));
    }
    let nz = data[0].z.len();
    if let Some(&bad) = cols.iter().find(|&&c| c >= nz) {
        return Err(CencovError::Config(format!("nuisance covariate column {bad} out of range")));
    }
    for (i, o) in data.iter().enumerate() {
        o.validate(i)?;
    }
    let n_obs = data.iter().filter(|o| o.delta == 1).count();
    let n_cens = data.len() - n_obs;
    let s = match dependence {
        Dependence::Ind => 0.0,
        Dependence::Dep => known_cov_xc_given_z,
    };
    if dependence == Dependence::Dep && (n_obs == 0 || n_cens == 0) {
        return Err(CencovError::Config("dependent nuisance fit needs both observed and censored records".into()));
    }
    let layout = AlphaLayout {
        cols: cols.to_vec(),
        nz,
        x_block: n_obs > 0,
        c_block: n_cens > 0,
        dependence,
        cov_xc_given_z: s,
    };
    fit_alpha_layout(data, layout)
}

/// Gaussian regression of `X` on the selected covariates using complete records only,
/// packaged like [`fit_alpha`] with the censoring block absent.
pub fn fit_x_given_z_complete_cases(data: &[CensoredObservation], cols: &[usize]) -> Result<AlphaFit> {
    let nz = data.first().map_or(0, |o| o.z.len());
    if !data.iter().any(|o| o.delta == 1) {
        return Err(CencovError::Config("no complete records to fit X | Z".into()));
    }
    if let Some(&bad) = cols.iter().find(|&&c| c >= nz) {
        return Err(CencovError::Config(format!("nuisance covariate column {bad} out of range")));
    }
    let layout = AlphaLayout {
        cols: cols.to_vec(),
        nz,
        x_block: true,
        c_block: false,
        dependence: Dependence::Ind,
        cov_xc_given_z: 0.0,
    };
    fit_alpha_layout(data, layout)
}

fn fit_alpha_layout(data: &[CensoredObservation], layout: AlphaLayout) -> Result<AlphaFit> {
    let cols = &layout.cols;
    let s = layout.cov_xc_given_z;
    let mut start = Vec::new();
    if layout.x_block {
        start.extend(ols_block(data, cols, |o| o.delta == 1));
    }
    if layout.c_block {
        start.extend(ols_block(data, cols, |o| o.delta == 0));
    }
    if s != 0.0 {
        // Keep the starting conditional variances positive.
        let b = layout.block_len();
        let floor = (s.abs() * 1.5).sqrt();
        start[b - 1] = start[b - 1].max(floor);
        start[2 * b - 1] = start[2 * b - 1].max(floor);
    }
    let positive = layout.sd_indices();
    let cfg = SolverConfig { tol: 1e-9, max_iter: 200, ..SolverConfig::default() };
    let out = solve_estimating_equation(|p| Ok(mean_score(&layout, p, data)), &start, &positive, &cfg)
        .map_err(|e| e.at_stage("nuisance fit"))?;
    for &i in &positive {
        if out.x[i] < 1e-6 {
            return Err(CencovError::InvalidParameter(format!(
                "nuisance sd estimate {:.3e} is at the boundary",
                out.x[i]
            )));
        }
    }
    let (loglik, scores) = alpha_loglik_and_scores(&layout, &out.x, data);
    let h = relative_steps(&out.x, 1e-5);
    let jac = numeric_jacobian(|p| Ok(mean_score(&layout, p, data)), &out.x, &h)?;
    let info = -(&jac + jac.transpose()) * (0.5 * data.len() as f64);
    let (x_given_z, c_given_z) = layout.unpack(&out.x);
    Ok(AlphaFit {
        params: out.x,
        layout,
        x_given_z,
        c_given_z,
        scores,
        info,
        loglik,
        iterations: out.iterations,
    })
}

// ---------------------------------------------------------------------------
// Logistic regression.

#[derive(Debug, Clone, PartialEq)]
pub struct LogisticFit {
    /// Coefficients over all design columns; dropped columns are zero.
    pub coef: Vec<f64>,
    /// Indices of design columns that were estimated.
    pub active: Vec<usize>,
    pub dropped: Vec<usize>,
    /// Per-record scores over the active columns.
    pub scores: Vec<Vec<f64>>,
    /// Fisher information over the active columns (sum over records).
    pub info: DMatrix<f64>,
    pub iterations: usize,
}

fn select_columns(design: &DMatrix<f64>) -> Vec<usize> {
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut keep = Vec::new();
    for j in 0..design.ncols() {
        let col = design.column(j).into_owned();
        let norm = col.norm();
        if norm == 0.0 {
            continue;
        }
        let mut r = col.clone();
        for q in &basis {
            let c = q.dot(&r);
            r -= q * c;
        }
        if r.norm() > 1e-8 * norm {
            let rn = r.norm();
            basis.push(r / rn);
            keep.push(j);
        }
    }
    keep
}

/// Bernoulli maximum likelihood with a logit link. Constant or collinear columns are
/// dropped with a warning.
pub fn fit_logistic(indicator: &[u8], design: &DMatrix<f64>) -> Result<LogisticFit> {
    let n = indicator.len();
    if design.nrows() != n {
        return Err(CencovError::DimensionMismatch { what: "logistic design rows", expected: n, got: design.nrows() });
    }
    let ones = indicator.iter().filter(|&&d| d == 1).count();
    if ones == 0 || ones == n {
        return Err(CencovError::Separation("only one indicator class present".into()));
    }
    let active = select_columns(design);
    let dropped: Vec<usize> = (0..design.ncols()).filter(|j| !active.contains(j)).collect();
    if !dropped.is_empty() {
        log::warn!("logistic fit dropped constant or collinear design columns {dropped:?}");
    }
    let x = design.select_columns(&active);
    let q = active.len();
    let yv = DVector::from_iterator(n, indicator.iter().map(|&d| d as f64));
    let mut beta = DVector::zeros(q);
    let mut iterations = 0;
    let mut converged = false;
    for it in 1..=100 {
        iterations = it;
        let eta = &x * &beta;
        let p = eta.map(logistic);
        let wv = p.map(|v| v * (1.0 - v));
        let grad = x.transpose() * (&yv - &p);
        let xw = DMatrix::from_fn(n, q, |i, j| x[(i, j)] * wv[i]);
        let info = x.transpose() * xw;
        let step = match info.clone().cholesky() {
            Some(ch) => ch.solve(&grad),
            None => break,
        };
        beta += &step;
        if step.amax() < 1e-10 * (1.0 + beta.amax()) {
            converged = true;
            break;
        }
        if beta.amax() > 50.0 {
            break;
        }
    }
    let eta = &x * &beta;
    let separated = (0..n).all(|i| (eta[i] > 0.0) == (indicator[i] == 1));
    if !converged || beta.amax() > 50.0 {
        if separated || beta.amax() > 50.0 {
            return Err(CencovError::Separation(format!(
                "coefficients diverged (max |coef| = {:.1}) after {iterations} iterations",
                beta.amax()
            )));
        }
        return Err(CencovError::NonConvergence { iterations, residual: f64::NAN, last: beta.iter().copied().collect() });
    }
    let p = eta.map(logistic);
    let scores = (0..n)
        .map(|i| (0..q).map(|j| (yv[i] - p[i]) * x[(i, j)]).collect())
        .collect();
    let info = {
        let xw = DMatrix::from_fn(n, q, |i, j| x[(i, j)] * p[i] * (1.0 - p[i]));
        x.transpose() * xw
    };
    let mut coef = vec![0.0; design.ncols()];
    for (k, &j) in active.iter().enumerate() {
        coef[j] = beta[k];
    }
    Ok(LogisticFit { coef, active, dropped, scores, info, iterations })
}

/// Design rows `(1, y, z)`.
pub fn kappa_design(y: &[f64], z: &[Vec<f64>]) -> DMatrix<f64> {
    let nz = z.first().map_or(0, Vec::len);
    DMatrix::from_fn(y.len(), nz + 2, |i, j| match j {
        0 => 1.0,
        1 => y[i],
        _ => z[i][j - 2],
    })
}

/// Logistic model for `Pr(observed | Y, Z)` over `(1, y, z)`.
pub fn fit_logistic_kappa(indicator: &[u8], y: &[f64], z: &[Vec<f64>]) -> Result<LogisticFit> {
    fit_logistic(indicator, &kappa_design(y, z))
}

/// Logistic model for `Pr(R = 1 | Z)`, returned over `(1, x, z)` with the x-coefficient
/// fixed at zero.
pub fn fit_logistic_pi_z(indicator: &[u8], z: &[Vec<f64>]) -> Result<LogisticFit> {
    let n = indicator.len();
    let nz = z.first().map_or(0, Vec::len);
    let design = DMatrix::from_fn(n, nz + 2, |i, j| match j {
        0 => 1.0,
        1 => 0.0,
        _ => z[i][j - 2],
    });
    fit_logistic(indicator, &design)
}

// ---------------------------------------------------------------------------
// Estimated nuisance parameters as one vector.

/// Which logistic block was estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogisticTarget {
    Kappa,
    PiZ,
}

/// The estimated nuisance blocks, exposing their stacked parameter vector, per-record
/// scores and information for variance and projection corrections.
#[derive(Debug, Clone, Default)]
pub struct NuisanceEstimates {
    pub alpha: Option<AlphaFit>,
    pub logistic: Option<(LogisticTarget, LogisticFit)>,
}

impl NuisanceEstimates {
    pub fn is_empty(&self) -> bool {
        self.alpha.is_none() && self.logistic.is_none()
    }

    pub fn dim(&self) -> usize {
        self.alpha.as_ref().map_or(0, |a| a.params.len()) + self.logistic.as_ref().map_or(0, |(_, l)| l.active.len())
    }

    pub fn params(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.dim());
        if let Some(a) = &self.alpha {
            v.extend_from_slice(&a.params);
        }
        if let Some((_, l)) = &self.logistic {
            v.extend(l.active.iter().map(|&j| l.coef[j]));
        }
        v
    }

    /// A copy of `base` with the estimated blocks replaced by the values in `nu`.
    pub fn apply(&self, base: &NuisanceBundle, nu: &[f64]) -> NuisanceBundle {
        let mut b = base.clone();
        let mut off = 0;
        if let Some(a) = &self.alpha {
            let k = a.params.len();
            let (x, c) = a.layout.unpack(&nu[off..off + k]);
            if x.is_some() {
                b.x_given_z = x;
            }
            if c.is_some() {
                b.c_given_z = c;
            }
            b.c_given_xz = None;
            off += k;
        }
        if let Some((target, l)) = &self.logistic {
            let mut coef = l.coef.clone();
            for (k, &j) in l.active.iter().enumerate() {
                coef[j] = nu[off + k];
            }
            match target {
                LogisticTarget::Kappa => b.kappa = Some(coef),
                LogisticTarget::PiZ => b.pi_xz_logistic = Some(coef),
            }
        }
        b
    }

    /// Per-record stacked nuisance scores.
    pub fn scores(&self, n: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|i| {
                let mut v = Vec::with_capacity(self.dim());
                if let Some(a) = &self.alpha {
                    v.extend_from_slice(&a.scores[i]);
                }
                if let Some((_, l)) = &self.logistic {
                    v.extend_from_slice(&l.scores[i]);
                }
                v
            })
            .collect()
    }

    /// `E[d Phi_nu / d nu']` estimated as minus the mean information, block-diagonal.
    pub fn mean_score_jacobian(&self, n: usize) -> DMatrix<f64> {
        let d = self.dim();
        let mut m = DMatrix::zeros(d, d);
        let mut off = 0;
        if let Some(a) = &self.alpha {
            let k = a.params.len();
            m.view_mut((0, 0), (k, k)).copy_from(&(-&a.info / n as f64));
            off = k;
        }
        if let Some((_, l)) = &self.logistic {
            let k = l.active.len();
            m.view_mut((off, off), (k, k)).copy_from(&(-&l.info / n as f64));
        }
        m
    }
}
