#![allow(dead_code)]

use std::path::PathBuf;

use cencov::closed_forms::{censored_marginal_loglik, psi_closed, psi_effective, ObservationModel};
use cencov::estimators::PhiEngine;
use cencov::inference::record_jacobian;
use cencov::model::{log_density_y, mean_value, score_full};
use cencov::simulation::{generate_dataset, Scenario};
use cencov::{
    fit_estimator, AugKind, Dataset, EstimatorKind, EstimatorSpec, FitOptions, GaussianConditional, MeanSpec,
    MissingObservation, NuisanceBundle, NuisanceConfig, Problem, PsiMode, Theta,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const TTE: MeanSpec = MeanSpec::TimeToEvent { age_column: 0 };

pub fn scenario_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("scenarios").join(format!("{name}.json"))
}

pub fn load(name: &str) -> Scenario {
    cencov::io::load_scenario(&scenario_path(name)).expect("bundled scenario")
}

// Gauss-Kronrod 7/15 pair on [-1, 1].
const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_728,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

fn gk15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut kron = WGK[7] * fc;
    let mut gauss = WG[3] * fc;
    for j in 0..7 {
        let s = f(c - h * XGK[j]) + f(c + h * XGK[j]);
        kron += WGK[j] * s;
        if j % 2 == 1 {
            gauss += WG[j / 2] * s;
        }
    }
    (kron * h, ((kron - gauss) * h).abs())
}

/// Adaptive Gauss-Kronrod integral of `f` over `[a, b]`, started from `panels` equal pieces.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, rel_tol: f64, panels: usize) -> f64 {
    let width = (b - a) / panels as f64;
    let mut stack: Vec<(f64, f64, usize)> = (0..panels).map(|k| (a + k as f64 * width, a + (k + 1) as f64 * width, 0)).collect();
    let rough: f64 = stack.iter().map(|&(l, r, _)| gk15(&f, l, r).0.abs()).sum();
    let mut total = 0.0;
    while let Some((l, r, depth)) = stack.pop() {
        let (v, err) = gk15(&f, l, r);
        let allowed = rel_tol * rough.max(1e-300) * (r - l) / (b - a);
        if err <= allowed || depth > 40 {
            total += v;
        } else {
            let m = 0.5 * (l + r);
            stack.push((l, m, depth + 1));
            stack.push((m, r, depth + 1));
        }
    }
    total
}

/// Integration window covering the mass of `f(y | x, z) f(x | z)` in `x`.
fn window(theta: &Theta, y: f64, z: &[f64], mu: f64, sd: f64, spec: MeanSpec) -> (f64, f64, f64) {
    let m0 = mean_value(theta, 0.0, z, spec).unwrap();
    let k = m0 - mean_value(theta, 1.0, z, spec).unwrap();
    let mut lo = mu - 40.0 * sd;
    let mut hi = mu + 40.0 * sd;
    if k.abs() > 1e-3 {
        let xy = (m0 - y) / k;
        let half = 40.0 * theta.sigma / k.abs();
        lo = lo.max(xy - half).min(hi);
        hi = hi.min(xy + half).max(lo);
    }
    // log kernel peak on a fine grid, used only for scaling
    let peak = (0..=4000)
        .map(|i| lo + (hi - lo) * i as f64 / 4000.0)
        .map(|x| log_kernel(theta, y, x, z, mu, sd, spec))
        .fold(f64::NEG_INFINITY, f64::max);
    (lo, hi, peak)
}

fn log_kernel(theta: &Theta, y: f64, x: f64, z: &[f64], mu: f64, sd: f64, spec: MeanSpec) -> f64 {
    let u = (x - mu) / sd;
    log_density_y(theta, y, x, z, spec).unwrap() - 0.5 * u * u - sd.ln() - 0.918_938_533_204_672_7
}

/// `-E[S | y, z]` under `X | Z ~ N(mu, sd^2)` by adaptive quadrature.
pub fn psi_closed_quadrature(theta: &Theta, y: f64, z: &[f64], mu: f64, sd: f64, spec: MeanSpec) -> Vec<f64> {
    let (lo, hi, peak) = window(theta, y, z, mu, sd, spec);
    let w = |x: f64| (log_kernel(theta, y, x, z, mu, sd, spec) - peak).exp();
    let den = integrate(w, lo, hi, 1e-13, 64);
    (0..theta.dim())
        .map(|j| -integrate(|x| w(x) * score_full(theta, y, x, z, spec).unwrap()[j], lo, hi, 1e-13, 64) / den)
        .collect()
}

/// `log int_w^inf f(y | x, z) f(x | z) dx` by adaptive quadrature.
pub fn censored_loglik_quadrature(theta: &Theta, y: f64, w: f64, z: &[f64], mu: f64, sd: f64, spec: MeanSpec) -> f64 {
    let (lo, hi, peak) = window(theta, y, z, mu, sd, spec);
    let lo = lo.max(w);
    let hi = hi.max(lo + sd);
    let v = integrate(|x| (log_kernel(theta, y, x, z, mu, sd, spec) - peak).exp(), lo, hi, 1e-13, 64);
    v.ln() + peak
}

/// `-E[pi S] / E[pi]` over `X | Y, Z` by adaptive quadrature.
pub fn psi_acc_quadrature(
    theta: &Theta,
    y: f64,
    z: &[f64],
    mu: f64,
    sd: f64,
    model: &ObservationModel,
    spec: MeanSpec,
) -> Vec<f64> {
    let (lo, hi, peak) = window(theta, y, z, mu, sd, spec);
    let w = |x: f64| (log_kernel(theta, y, x, z, mu, sd, spec) - peak).exp() * model.prob(x, z, None);
    let den = integrate(w, lo, hi, 1e-13, 64);
    (0..theta.dim())
        .map(|j| -integrate(|x| w(x) * score_full(theta, y, x, z, spec).unwrap()[j], lo, hi, 1e-13, 64) / den)
        .collect()
}

pub struct OraclePoint {
    pub theta: Theta,
    pub spec: MeanSpec,
    pub y: f64,
    pub w: f64,
    pub x: f64,
    pub z: Vec<f64>,
    pub x_law: GaussianConditional,
}

/// Random parameter/data points for both mean forms.
pub fn oracle_points(count: usize, seed: u64) -> Vec<OraclePoint> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let linear = i % 2 == 1;
            let spec = if linear { MeanSpec::LinearX } else { TTE };
            let nz = if linear { 1 } else { 2 };
            let beta: Vec<f64> = (0..spec.beta_len(nz)).map(|_| rng.random_range(-3.0..3.0)).collect();
            let sigma = rng.random_range(0.3..2.0);
            let theta = Theta::new(beta, sigma).unwrap();
            let z: Vec<f64> = (0..nz).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let x_law = GaussianConditional::new(
                rng.random_range(-1.0..1.0),
                (0..nz).map(|_| rng.random_range(-0.8..0.8)).collect(),
                rng.random_range(0.4..2.0),
            )
            .unwrap();
            let x = x_law.mean(&z) + x_law.sd * rng.sample::<f64, _>(StandardNormal);
            let y = mean_value(&theta, x, &z, spec).unwrap() + sigma * rng.sample::<f64, _>(StandardNormal);
            let w = x - rng.random_range(0.0..2.0) * x_law.sd;
            OraclePoint { theta, spec, y, w, x, z, x_law }
        })
        .collect()
}

/// Largest absolute gap between closed-form Psi and quadrature.
pub fn psi_closed_max_error(count: usize, seed: u64) -> f64 {
    oracle_points(count, seed)
        .iter()
        .map(|p| {
            let got = psi_closed(&p.theta, p.y, &p.z, &p.x_law, p.spec).unwrap();
            let want = psi_closed_quadrature(&p.theta, p.y, &p.z, p.x_law.mean(&p.z), p.x_law.sd, p.spec);
            got.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
        })
        .fold(0.0, f64::max)
}

/// Largest relative gap between the closed-form censored log-likelihood and quadrature.
pub fn censored_loglik_max_rel_error(count: usize, seed: u64) -> f64 {
    oracle_points(count, seed)
        .iter()
        .map(|p| {
            let got = censored_marginal_loglik(&p.theta, p.y, p.w, &p.z, &p.x_law, p.spec).unwrap();
            let want = censored_loglik_quadrature(&p.theta, p.y, p.w, &p.z, p.x_law.mean(&p.z), p.x_law.sd, p.spec);
            (got - want).abs() / want.abs().max(1.0)
        })
        .fold(0.0, f64::max)
}

/// Largest relative gap between the analytic score and a 4th-order central difference.
pub fn score_fd_max_error(count: usize, seed: u64) -> f64 {
    oracle_points(count, seed)
        .iter()
        .map(|p| {
            let s = score_full(&p.theta, p.y, p.x, &p.z, p.spec).unwrap();
            let t0 = p.theta.to_vec();
            (0..t0.len())
                .map(|j| {
                    let h = 1e-3 * (1.0 + t0[j].abs());
                    let at = |d: f64| {
                        let mut t = t0.clone();
                        t[j] += d;
                        log_density_y(&Theta::from_slice(&t), p.y, p.x, &p.z, p.spec).unwrap()
                    };
                    let fd = (-at(2.0 * h) + 8.0 * at(h) - 8.0 * at(-h) + at(-2.0 * h)) / (12.0 * h);
                    (fd - s[j]).abs() / s[j].abs().max(1.0)
                })
                .fold(0.0, f64::max)
        })
        .fold(0.0, f64::max)
}

/// Largest `|mean(J_i + phi_i phi_i')| / MC SE` entry for the complete-case function at the truth.
pub fn cc_information_identity(n: usize) -> f64 {
    let mut scenario = load("ind_known");
    scenario.n = n;
    let data = generate_dataset(&scenario, 0).unwrap();
    let ds = Dataset::censored(&data.records, scenario.mean_spec()).unwrap();
    let bundle = scenario.known_bundle();
    let engine = PhiEngine::new(EstimatorSpec::new(EstimatorKind::Cc), &ds, &bundle, None, false).unwrap();
    let theta = scenario.theta_true.to_vec();
    let p = theta.len();
    let mut sum = vec![0.0; p * p];
    let mut sum_sq = vec![0.0; p * p];
    for i in 0..ds.n() {
        let j = record_jacobian(&engine, &theta, i, 1e-5).unwrap();
        let phi = engine.phi_i(&theta, i).unwrap();
        for a in 0..p {
            for b in 0..p {
                let v = j[(a, b)] + phi[a] * phi[b];
                sum[a * p + b] += v;
                sum_sq[a * p + b] += v * v;
            }
        }
    }
    let nf = n as f64;
    (0..p * p)
        .map(|k| {
            let mean = sum[k] / nf;
            let var = (sum_sq[k] / nf - mean * mean).max(0.0) * nf / (nf - 1.0);
            let se = (var / nf).sqrt();
            if se > 0.0 {
                mean.abs() / se
            } else if mean.abs() < 1e-12 {
                0.0
            } else {
                f64::INFINITY
            }
        })
        .fold(0.0, f64::max)
}

/// Missing-covariate data with `logit Pr(R = 1 | z) = 0.3 + 0.8 z`.
pub fn missing_dataset(n: usize, seed: u64) -> (Dataset, NuisanceBundle) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let obs: Vec<MissingObservation> = (0..n)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            let x = 0.5 * z + 0.75_f64.sqrt() * rng.sample::<f64, _>(StandardNormal);
            let y = 1.0 + 0.5 * x - 0.7 * z + 0.8 * rng.sample::<f64, _>(StandardNormal);
            let pr = 1.0 / (1.0 + (-(0.3 + 0.8 * z)).exp());
            let r = (rng.random::<f64>() < pr) as u8;
            MissingObservation { y, x: (r == 1).then_some(x), r, z: vec![z] }
        })
        .collect();
    let bundle = NuisanceBundle {
        x_given_z: Some(GaussianConditional::new(0.0, vec![0.5], 0.75_f64.sqrt()).unwrap()),
        pi_xz_logistic: Some(vec![0.3, 0.0, 0.8]),
        ..Default::default()
    };
    (Dataset::missing(&obs, MeanSpec::LinearX).unwrap(), bundle)
}

/// Largest coordinate gap between the effective-Psi ACC and MACC fits on missing data under
/// independent missingness.
pub fn miss_acc_macc_gap() -> f64 {
    let (ds, bundle) = missing_dataset(400, 11);
    let cfg = NuisanceConfig::Known { bundle };
    let opts = FitOptions { solver: cencov::numerics::SolverConfig { tol: 1e-12, ..Default::default() }, ..Default::default() };
    let spec = |k| EstimatorSpec::new(k).with_problem(Problem::Miss).with_psi(PsiMode::Effective);
    let acc = fit_estimator(spec(EstimatorKind::Acc), &ds, &cfg, &opts).unwrap();
    let macc = fit_estimator(spec(EstimatorKind::Macc), &ds, &cfg, &opts).unwrap();
    acc.theta_hat.to_vec().iter().zip(macc.theta_hat.to_vec()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}

/// Largest gap between any estimator and the full-data fit when nothing is censored.
pub fn zero_censoring_gap() -> f64 {
    let mut scenario = load("ind_known");
    scenario.n = 300;
    let data = generate_dataset(&scenario, 3).unwrap();
    let spec = scenario.mean_spec();
    let records: Vec<_> = data
        .records
        .iter()
        .zip(&data.x_true)
        .map(|(r, &x)| cencov::CensoredObservation { y: r.y, w: x, delta: 1, z: r.z.clone() })
        .collect();
    let ds = Dataset::censored(&records, spec).unwrap();
    let mut bundle = scenario.known_bundle();
    if let Some(c) = bundle.c_given_z.as_mut() {
        c.intercept += 1e3;
    }
    let cfg = NuisanceConfig::Known { bundle };
    let opts = FitOptions { solver: cencov::numerics::SolverConfig { tol: 1e-12, ..Default::default() }, ..Default::default() };
    let y: Vec<f64> = data.records.iter().map(|r| r.y).collect();
    let z: Vec<Vec<f64>> = data.records.iter().map(|r| r.z.clone()).collect();
    let full = Dataset::fully_observed(&y, &data.x_true, &z, spec).unwrap();
    let reference = fit_estimator(EstimatorSpec::new(EstimatorKind::Cc), &full, &cfg, &opts).unwrap().theta_hat.to_vec();
    [EstimatorKind::Cc, EstimatorKind::Ipw, EstimatorKind::Mle, EstimatorKind::Acc, EstimatorKind::Macc, EstimatorKind::Aipw]
        .iter()
        .map(|&k| {
            let fit = fit_estimator(EstimatorSpec::new(k), &ds, &cfg, &opts).unwrap();
            fit.theta_hat.to_vec().iter().zip(&reference).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
        })
        .fold(0.0, f64::max)
}

/// Largest gap between effective ACC Psi and quadrature for a censoring observation model.
pub fn psi_acc_max_error(count: usize, seed: u64) -> f64 {
    oracle_points(count, seed)
        .iter()
        .map(|p| {
            let c_dist = GaussianConditional::new(0.3, vec![0.2; p.z.len()], 1.5).unwrap();
            let model = ObservationModel::Censoring { c_dist, dependence: cencov::Dependence::Ind };
            let got = psi_effective(AugKind::Acc, p.y, &p.z, &p.theta, &p.x_law, &model, p.spec).unwrap();
            let want = psi_acc_quadrature(&p.theta, p.y, &p.z, p.x_law.mean(&p.z), p.x_law.sd, &model, p.spec);
            got.iter().zip(&want).map(|(a, b)| (a - b).abs() / b.abs().max(1.0)).fold(0.0, f64::max)
        })
        .fold(0.0, f64::max)
}
