//! Outcome model `Y = m(X, Z; beta) + eps`, `eps ~ N(0, sigma^2)`, its score, and
//! the observed-record types shared by the estimators.

use serde::{Deserialize, Serialize};

use crate::error::{CencovError, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Regression parameters laid out as `(beta0, beta_x, beta_z..., sigma)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theta {
    pub beta: Vec<f64>,
    pub sigma: f64,
}

impl Theta {
    pub fn new(beta: Vec<f64>, sigma: f64) -> Result<Self> {
        if beta.len() < 2 {
            return Err(CencovError::DimensionMismatch {
                what: "beta (intercept and x-slope required)",
                expected: 2,
                got: beta.len(),
            });
        }
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(CencovError::InvalidParameter(format!(
                "sigma must be positive and finite, got {sigma}"
            )));
        }
        Ok(Theta { beta, sigma })
    }

    /// Number of entries in the flat layout.
    pub fn dim(&self) -> usize {
        self.beta.len() + 1
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.beta.clone();
        v.push(self.sigma);
        v
    }

    /// Builds from the flat layout without validating `sigma`.
    pub fn from_slice(v: &[f64]) -> Self {
        let p = v.len();
        Theta {
            beta: v[..p - 1].to_vec(),
            sigma: v[p - 1],
        }
    }
}

/// How the partially observed covariate enters the mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "form")]
pub enum MeanSpec {
    /// `beta0 + beta1 * x + beta_z' z`.
    LinearX,
    /// `beta0 + beta1 * (a - x) + beta_z' z_rest`, with `a = z[age_column]`.
    TimeToEvent { age_column: usize },
}

/// The mean written as `c0 - k * x` and the x-regressor written as `g0 + g1 * x`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearParts {
    pub c0: f64,
    pub k: f64,
    pub g0: f64,
    pub g1: f64,
}

impl MeanSpec {
    /// Number of beta entries implied by a covariate vector of length `nz`.
    pub fn beta_len(&self, nz: usize) -> usize {
        match self {
            MeanSpec::LinearX => 2 + nz,
            MeanSpec::TimeToEvent { .. } => 1 + nz,
        }
    }

    pub fn theta_dim(&self, nz: usize) -> usize {
        self.beta_len(nz) + 1
    }

    pub fn check(&self, theta: &Theta, z: &[f64]) -> Result<()> {
        if let MeanSpec::TimeToEvent { age_column } = self {
            if *age_column >= z.len() {
                return Err(CencovError::DimensionMismatch {
                    what: "z (age column out of range)",
                    expected: age_column + 1,
                    got: z.len(),
                });
            }
        }
        let expected = self.beta_len(z.len());
        if theta.beta.len() != expected {
            return Err(CencovError::DimensionMismatch {
                what: "beta",
                expected,
                got: theta.beta.len(),
            });
        }
        Ok(())
    }

    /// Covariates multiplying `beta[2..]`, in order.
    pub fn slope_covariates<'a>(&self, z: &'a [f64]) -> impl Iterator<Item = f64> + 'a {
        let skip = match self {
            MeanSpec::LinearX => usize::MAX,
            MeanSpec::TimeToEvent { age_column } => *age_column,
        };
        z.iter()
            .enumerate()
            .filter(move |(j, _)| *j != skip)
            .map(|(_, v)| *v)
    }

    /// Decomposes the mean at `(theta, z)`; assumes dimensions were checked.
    pub fn linear_parts(&self, beta: &[f64], z: &[f64]) -> LinearParts {
        let zpart: f64 = beta[2..]
            .iter()
            .zip(self.slope_covariates(z))
            .map(|(b, v)| b * v)
            .sum();
        match self {
            MeanSpec::LinearX => LinearParts {
                c0: beta[0] + zpart,
                k: -beta[1],
                g0: 0.0,
                g1: 1.0,
            },
            MeanSpec::TimeToEvent { age_column } => {
                let a = z[*age_column];
                LinearParts {
                    c0: beta[0] + beta[1] * a + zpart,
                    k: beta[1],
                    g0: a,
                    g1: -1.0,
                }
            }
        }
    }
}

/// One record of the right-censored covariate problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CensoredObservation {
    pub y: f64,
    pub w: f64,
    pub delta: u8,
    pub z: Vec<f64>,
}

/// One record of the missing covariate problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissingObservation {
    pub y: f64,
    pub x: Option<f64>,
    pub r: u8,
    pub z: Vec<f64>,
}

impl CensoredObservation {
    pub fn validate(&self, index: usize) -> Result<()> {
        if self.delta > 1 {
            return Err(invalid(index, format!("delta must be 0 or 1, got {}", self.delta)));
        }
        if !self.y.is_finite() || !self.w.is_finite() || self.z.iter().any(|v| !v.is_finite()) {
            return Err(invalid(index, "non-finite field".into()));
        }
        Ok(())
    }
}

impl MissingObservation {
    pub fn validate(&self, index: usize) -> Result<()> {
        if self.r > 1 {
            return Err(invalid(index, format!("r must be 0 or 1, got {}", self.r)));
        }
        if (self.r == 1) != self.x.is_some() {
            return Err(invalid(index, "x must be present exactly when r = 1".into()));
        }
        if !self.y.is_finite()
            || self.x.is_some_and(|x| !x.is_finite())
            || self.z.iter().any(|v| !v.is_finite())
        {
            return Err(invalid(index, "non-finite field".into()));
        }
        Ok(())
    }
}

fn invalid(index: usize, reason: String) -> CencovError {
    CencovError::InvalidObservation { index, reason }
}

pub fn mean_value(theta: &Theta, x: f64, z: &[f64], spec: MeanSpec) -> Result<f64> {
    spec.check(theta, z)?;
    let lp = spec.linear_parts(&theta.beta, z);
    Ok(lp.c0 - lp.k * x)
}

pub fn log_density_y(theta: &Theta, y: f64, x: f64, z: &[f64], spec: MeanSpec) -> Result<f64> {
    let eps = y - mean_value(theta, x, z, spec)?;
    let s = theta.sigma;
    Ok(-0.5 * LN_2PI - s.ln() - 0.5 * (eps / s) * (eps / s))
}

pub fn score_full(theta: &Theta, y: f64, x: f64, z: &[f64], spec: MeanSpec) -> Result<Vec<f64>> {
    spec.check(theta, z)?;
    let mut out = vec![0.0; theta.dim()];
    score_into(&theta.beta, theta.sigma, y, x, z, spec, &mut out);
    Ok(out)
}

/// Unchecked score kernel writing into `out` (length `beta.len() + 1`).
pub(crate) fn score_into(
    beta: &[f64],
    sigma: f64,
    y: f64,
    x: f64,
    z: &[f64],
    spec: MeanSpec,
    out: &mut [f64],
) {
    let lp = spec.linear_parts(beta, z);
    let eps = y - lp.c0 + lp.k * x;
    let s2 = sigma * sigma;
    let r = eps / s2;
    out[0] = r;
    out[1] = (lp.g0 + lp.g1 * x) * r;
    for (o, v) in out[2..beta.len()].iter_mut().zip(spec.slope_covariates(z)) {
        *o = v * r;
    }
    out[beta.len()] = -1.0 / sigma + eps * eps / (s2 * sigma);
}
