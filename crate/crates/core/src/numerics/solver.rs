use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{CencovError, Result};

/// Damped Newton settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub max_iter: usize,
    /// Convergence threshold on the sup-norm of the per-observation mean.
    pub tol: f64,
    pub step_damping: f64,
    /// Relative central-difference step; the absolute step is `jacobian_step * (1 + |x_j|)`.
    pub jacobian_step: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            max_iter: 100,
            tol: 1e-8,
            step_damping: 1.0,
            jacobian_step: 1e-6,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iter < 1 {
            return Err(CencovError::Config("solver max_iter must be at least 1".into()));
        }
        if !(self.tol >= 0.0) {
            return Err(CencovError::Config("solver tol must be non-negative".into()));
        }
        if !(self.step_damping > 0.0 && self.step_damping <= 1.0) {
            return Err(CencovError::Config("step_damping must lie in (0, 1]".into()));
        }
        if !(self.jacobian_step > 0.0) {
            return Err(CencovError::Config("jacobian_step must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveOutcome {
    pub x: Vec<f64>,
    pub iterations: usize,
    pub residual: f64,
}

/// Lower bound enforced on entries listed as positive.
pub const POSITIVITY_FLOOR: f64 = 1e-8;

/// Central-difference Jacobian; column `j` is `(f(x + h_j e_j) - f(x - h_j e_j)) / (2 h_j)`.
pub fn numeric_jacobian<F>(mut f: F, x: &[f64], h: &[f64]) -> Result<DMatrix<f64>>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let p = x.len();
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(p);
    let mut xp = x.to_vec();
    for j in 0..p {
        xp[j] = x[j] + h[j];
        let fp = f(&xp)?;
        xp[j] = x[j] - h[j];
        let fm = f(&xp)?;
        xp[j] = x[j];
        cols.push(fp.iter().zip(&fm).map(|(a, b)| (a - b) / (2.0 * h[j])).collect());
    }
    let m = cols.first().map_or(0, Vec::len);
    Ok(DMatrix::from_fn(m, p, |i, j| cols[j][i]))
}

pub fn relative_steps(x: &[f64], rel: f64) -> Vec<f64> {
    x.iter().map(|v| rel * (1.0 + v.abs())).collect()
}

/// Solves `J d = rhs`, retrying once with a small ridge when `J` is singular.
pub fn solve_with_ridge(j: &DMatrix<f64>, rhs: &DVector<f64>, what: &'static str) -> Result<DVector<f64>> {
    if let Some(d) = j.clone().lu().solve(rhs) {
        if d.iter().all(|v| v.is_finite()) {
            return Ok(d);
        }
    }
    let scale = j.diagonal().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(CencovError::Singular(what));
    }
    let ridged = j + DMatrix::identity(j.nrows(), j.ncols()) * (1e-8 * scale);
    match ridged.lu().solve(rhs) {
        Some(d) if d.iter().all(|v| v.is_finite()) => {
            log::warn!("{what}: singular Jacobian, used ridge-regularized solve");
            Ok(d)
        }
        _ => Err(CencovError::Singular(what)),
    }
}

fn sup_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| if x.is_nan() { f64::INFINITY } else { m.max(x.abs()) })
}

fn merit(v: &[f64]) -> f64 {
    let s: f64 = v.iter().map(|x| x * x).sum();
    if s.is_nan() { f64::INFINITY } else { s }
}

/// Finds a root of `phi_mean` (the per-observation mean estimating function) by damped
/// Newton iteration with a numeric Jacobian. Entries listed in `positive` are kept above
/// [`POSITIVITY_FLOOR`].
/// Iterates whose size exceeds this multiple of the starting point are treated as diverging.
const DIVERGENCE_FACTOR: f64 = 1e4;

pub fn solve_estimating_equation<F>(
    mut phi_mean: F,
    x0: &[f64],
    positive: &[usize],
    cfg: &SolverConfig,
) -> Result<SolveOutcome>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    cfg.validate()?;
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(CencovError::InvalidParameter("non-finite starting value".into()));
    }
    let bound = sup_norm(x0);
    let mut x = x0.to_vec();
    let mut f = phi_mean(&x)?;
    let mut iterations = 0;
    loop {
        let res = sup_norm(&f);
        if res < cfg.tol {
            return Ok(SolveOutcome { x, iterations, residual: res });
        }
        if iterations >= cfg.max_iter {
            return Err(CencovError::NonConvergence { iterations, residual: res, last: x });
        }
        iterations += 1;

        let h = relative_steps(&x, cfg.jacobian_step);
        let jac = numeric_jacobian(&mut phi_mean, &x, &h)?;
        let rhs = DVector::from_iterator(f.len(), f.iter().map(|v| -v));
        let dir = solve_with_ridge(&jac, &rhs, "Newton step")?;

        let current = merit(&f);
        let mut scale = cfg.step_damping;
        let mut best: Option<(Vec<f64>, Vec<f64>, f64)> = None;
        for _ in 0..40 {
            let cand: Vec<f64> = x.iter().zip(dir.iter()).map(|(a, d)| a + scale * d).collect();
            if positive.iter().all(|&i| cand[i] > POSITIVITY_FLOOR) {
                if let Ok(fc) = phi_mean(&cand) {
                    let m = merit(&fc);
                    if m < current {
                        best = Some((cand, fc, m));
                        break;
                    }
                    if m.is_finite() && best.as_ref().is_none_or(|b| m < b.2) {
                        best = Some((cand, fc, m));
                    }
                }
            }
            scale *= 0.5;
        }
        match best {
            Some((cand, fc, _)) => {
                x = cand;
                f = fc;
                if sup_norm(&x) > DIVERGENCE_FACTOR * (1.0 + bound) {
                    return Err(CencovError::NonConvergence { iterations, residual: sup_norm(&f), last: x });
                }
            }
            None => {
                return Err(CencovError::NonConvergence { iterations, residual: res, last: x });
            }
        }
    }
}
