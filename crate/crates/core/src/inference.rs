//! Sandwich covariance `n^{-1} A^{-1} B A^{-T}` with an optional correction of the meat for
//! estimated nuisance parameters, and Wald intervals.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{CencovError, Result};
use crate::estimators::{FitResult, PhiEngine};
use crate::numerics::normal::normal_quantile;
use crate::numerics::solver::{numeric_jacobian, relative_steps, SolverConfig};

/// Largest bread condition number accepted.
pub const MAX_CONDITION: f64 = 1e10;

/// Derivatives needed to account for estimated nuisance parameters `nu` in the meat.
#[derive(Debug, Clone)]
pub struct NuisanceCorrection {
    /// `E[d Phi / d nu']`, `p x q`.
    pub d_phi_d_nu: DMatrix<f64>,
    /// `E[d Phi_nu / d nu']`, `q x q`.
    pub d_score_d_nu: DMatrix<f64>,
    /// Per-record nuisance scores `Phi_nu`.
    pub scores: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct SandwichParts {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub b_corrected: Option<DMatrix<f64>>,
    pub covariance: DMatrix<f64>,
    pub covariance_uncorrected: DMatrix<f64>,
    pub condition: f64,
}

pub fn condition_number(a: &DMatrix<f64>) -> f64 {
    let sv = a.clone().svd(false, false).singular_values;
    let max = sv.iter().copied().fold(0.0, f64::max);
    let min = sv.iter().copied().fold(f64::INFINITY, f64::min);
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// `n^{-1} A^{-1} B A^{-T}`, symmetrized.
pub fn sandwich_from(a: &DMatrix<f64>, b: &DMatrix<f64>, n: usize) -> Result<DMatrix<f64>> {
    let cond = condition_number(a);
    if !(cond <= MAX_CONDITION) {
        return Err(CencovError::IllConditioned(cond));
    }
    let ainv = a.clone().lu().try_inverse().ok_or(CencovError::Singular("bread"))?;
    let v = &ainv * b * ainv.transpose() / n as f64;
    Ok((&v + v.transpose()) * 0.5)
}

/// Mean outer product of the given vectors.
pub fn mean_outer(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let p = rows.first().map_or(0, Vec::len);
    let mut m = DMatrix::zeros(p, p);
    for r in rows {
        let v = DVector::from_column_slice(r);
        m += &v * v.transpose();
    }
    m / rows.len().max(1) as f64
}

/// Bread from the numeric Jacobian of the mean estimating function.
pub fn bread(engine: &PhiEngine<'_>, theta: &[f64], cfg: &SolverConfig) -> Result<DMatrix<f64>> {
    let h = relative_steps(theta, cfg.jacobian_step);
    numeric_jacobian(|t| engine.phi_mean(t), theta, &h)
}

/// Numeric `d Phi_i / d theta'` for one record.
pub fn record_jacobian(engine: &PhiEngine<'_>, theta: &[f64], i: usize, step: f64) -> Result<DMatrix<f64>> {
    let h = relative_steps(theta, step);
    numeric_jacobian(|t| engine.phi_i(t, i), theta, &h)
}

pub fn sandwich_parts(
    engine: &PhiEngine<'_>,
    theta: &[f64],
    correction: Option<&NuisanceCorrection>,
    cfg: &SolverConfig,
) -> Result<SandwichParts> {
    let n = engine.n();
    let a = bread(engine, theta, cfg)?;
    let phis = engine.phi_all(theta)?;
    let b = mean_outer(&phis);
    let condition = condition_number(&a);
    let covariance_uncorrected = sandwich_from(&a, &b, n)?;
    let b_corrected = match correction {
        None => None,
        Some(c) => {
            let jinv = c
                .d_score_d_nu
                .clone()
                .lu()
                .try_inverse()
                .ok_or(CencovError::Singular("nuisance score Jacobian"))?;
            let m = &c.d_phi_d_nu * jinv;
            let adjusted: Vec<Vec<f64>> = phis
                .iter()
                .zip(&c.scores)
                .map(|(phi, s)| {
                    let v = DVector::from_column_slice(phi) - &m * DVector::from_column_slice(s);
                    v.iter().copied().collect()
                })
                .collect();
            Some(mean_outer(&adjusted))
        }
    };
    let covariance = match &b_corrected {
        Some(bc) => sandwich_from(&a, bc, n)?,
        None => covariance_uncorrected.clone(),
    };
    Ok(SandwichParts { a, b, b_corrected, covariance, covariance_uncorrected, condition })
}

/// Sandwich covariance at `theta` for the engine's estimating function.
pub fn sandwich(
    engine: &PhiEngine<'_>,
    theta: &[f64],
    correction: Option<&NuisanceCorrection>,
    cfg: &SolverConfig,
) -> Result<DMatrix<f64>> {
    sandwich_parts(engine, theta, correction, cfg).map(|p| p.covariance)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lower: f64,
    pub upper: f64,
}

impl Interval {
    pub fn contains(&self, v: f64) -> bool {
        self.lower <= v && v <= self.upper
    }
}

/// Wald intervals `theta_j +- z_{(1 + level)/2} SE_j`.
pub fn confidence_intervals(fit: &FitResult, level: f64) -> Result<Vec<Interval>> {
    wald_intervals(&fit.theta_hat.to_vec(), &fit.se, level)
}

pub fn wald_intervals(est: &[f64], se: &[f64], level: f64) -> Result<Vec<Interval>> {
    if !(level > 0.0 && level < 1.0) {
        return Err(CencovError::InvalidParameter(format!("confidence level must lie in (0, 1), got {level}")));
    }
    let q = normal_quantile(0.5 * (1.0 + level));
    Ok(est
        .iter()
        .zip(se)
        .map(|(e, s)| Interval { lower: e - q * s, upper: e + q * s })
        .collect())
}
