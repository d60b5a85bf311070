mod common;

use cencov::nuisance::{fit_alpha, fit_logistic_kappa};
use cencov::numerics::mvn_sample;
use cencov::simulation::{fit_entry, generate_dataset, GridEntry, Method};
use cencov::{CensoredObservation, Dependence};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Residual covariance of columns `a` and `b` after regressing each on column `z`.
fn residual_cov(d: &DMatrix<f64>, a: usize, b: usize, z: usize) -> f64 {
    let n = d.nrows() as f64;
    let mean = |c: usize| d.column(c).sum() / n;
    let cov = |u: usize, v: usize| {
        let (mu, mv) = (mean(u), mean(v));
        d.column(u).iter().zip(d.column(v).iter()).map(|(x, y)| (x - mu) * (y - mv)).sum::<f64>() / (n - 1.0)
    };
    cov(a, b) - cov(a, z) * cov(b, z) / cov(z, z)
}

#[test]
fn independent_design_censors_half() {
    let mut s = common::load("ind_known");
    s.n = 100_000;
    let d = generate_dataset(&s, 0).unwrap();
    let rate = d.censoring_rate();
    assert!((rate - 0.5).abs() < 0.01, "censoring rate {rate}");
}

#[test]
fn dependent_design_censors_half() {
    let mut s = common::load("dep_known");
    s.n = 100_000;
    let rate = generate_dataset(&s, 0).unwrap().censoring_rate();
    assert!((rate - 0.5).abs() < 0.01, "censoring rate {rate}");
}

#[test]
fn conditional_covariance_of_designs() {
    for (name, want) in [("ind_known", 0.0), ("dep_known", 0.35)] {
        let s = common::load(name);
        assert!((s.conditional_cov_xc() - want).abs() < 1e-12);
        let cencov::simulation::Design::TrivariateNormal { mean, cov } = &s.design else { panic!("design") };
        let cov = DMatrix::from_fn(3, 3, |i, j| cov[i][j]);
        let draws = mvn_sample(&nalgebra::DVector::from_column_slice(mean), &cov, 100_000, 9).unwrap();
        let r = residual_cov(&draws, 0, 1, 2);
        assert!((r - want).abs() < 0.02, "{name}: {r}");
    }
}

#[test]
fn generated_data_are_reproducible() {
    let s = common::load("dep_known");
    let a = generate_dataset(&s, 12).unwrap();
    let b = generate_dataset(&s, 12).unwrap();
    let bits = |d: &cencov::simulation::SimulatedData| {
        d.records.iter().flat_map(|r| [r.y.to_bits(), r.w.to_bits(), r.delta as u64]).collect::<Vec<_>>()
    };
    assert_eq!(bits(&a), bits(&b));
    assert_eq!(a.x_true, b.x_true);
}

#[test]
fn bartlett_design_marks_shifted_records() {
    let mut s = common::load("bartlett");
    s.n = 20_000;
    let d = generate_dataset(&s, 0).unwrap();
    let rate = d.censoring_rate();
    assert!((0.4..0.6).contains(&rate), "missing rate {rate}");
    for (r, x) in d.records.iter().zip(&d.x_true) {
        if r.delta == 1 {
            assert_eq!(r.w, *x);
        } else {
            assert!(r.w <= *x && r.w >= *x - 1.0);
        }
    }
}

#[test]
fn single_replication_complete_case_sanity() {
    let s = common::load("ind_known");
    let data = generate_dataset(&s, 0).unwrap();
    let entry = GridEntry {
        label: "CC".into(),
        estimator: Method::Cc,
        psi_mode: Default::default(),
        lambda_mode: Default::default(),
        probability_source: Default::default(),
        injectors: vec![],
        nuisance: None,
    };
    let fit = fit_entry(&s, &entry, &data, 0).unwrap();
    assert!(fit.estimate.iter().all(|v| v.is_finite()));
    let se = fit.se[0];
    assert!((0.5 * 0.0457..=2.0 * 0.0457).contains(&se), "SE {se}");
}

#[test]
fn censoring_law_recovered_by_maximum_likelihood() {
    let mut s = common::load("ind_known");
    s.n = 5000;
    let d = generate_dataset(&s, 4).unwrap();
    let fit = fit_alpha(&d.records, Dependence::Ind, 0.0, &[1]).unwrap();
    let truth = [0.0, 0.5, 0.75f64.sqrt(), 0.0, 0.5, 3.75f64.sqrt()];
    let cov = fit.info.clone().try_inverse().unwrap();
    for (j, t) in truth.iter().enumerate() {
        let se = cov[(j, j)].sqrt();
        assert!((fit.params[j] - t).abs() < 4.0 * se, "alpha[{j}] = {} vs {t} (se {se})", fit.params[j]);
    }
    let grad: Vec<f64> = (0..truth.len()).map(|j| fit.scores.iter().map(|s| s[j]).sum()).collect();
    assert!(grad.iter().all(|g| g.abs() <= 1e-6 * s.n as f64), "{grad:?}");
}

#[test]
fn uncensored_x_law_is_plain_regression() {
    let mut s = common::load("ind_known");
    s.n = 500;
    let d = generate_dataset(&s, 1).unwrap();
    let recs: Vec<CensoredObservation> =
        d.records.iter().zip(&d.x_true).map(|(r, &x)| CensoredObservation { w: x, delta: 1, ..r.clone() }).collect();
    let fit = fit_alpha(&recs, Dependence::Ind, 0.0, &[1]).unwrap();
    assert!(fit.c_given_z.is_none());
    let x = fit.x_given_z.unwrap();
    let n = recs.len() as f64;
    let (mz, mx) = (recs.iter().map(|r| r.z[1]).sum::<f64>() / n, recs.iter().map(|r| r.w).sum::<f64>() / n);
    let sxz: f64 = recs.iter().map(|r| (r.z[1] - mz) * (r.w - mx)).sum();
    let szz: f64 = recs.iter().map(|r| (r.z[1] - mz).powi(2)).sum();
    let slope = sxz / szz;
    let intercept = mx - slope * mz;
    let rss: f64 = recs.iter().map(|r| (r.w - intercept - slope * r.z[1]).powi(2)).sum();
    assert!((x.slopes[1] - slope).abs() < 1e-6);
    assert!((x.intercept - intercept).abs() < 1e-6);
    assert!((x.sd - (rss / n).sqrt()).abs() < 1e-6);
}

#[test]
fn logistic_fits_recover_their_generating_models() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 4000;
    let y: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let z: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.sample(StandardNormal)]).collect();
    let null: Vec<u8> = (0..n).map(|_| rng.random_bool(0.5) as u8).collect();
    let fit = fit_logistic_kappa(&null, &y, &z).unwrap();
    let se0 = fit.info.clone().try_inverse().unwrap()[(0, 0)].sqrt();
    assert!(fit.coef[0].abs() < 4.0 * se0);

    let kappa = [0.3, -0.8, 0.6];
    let ind: Vec<u8> = (0..n)
        .map(|i| {
            let p = 1.0 / (1.0 + (-(kappa[0] + kappa[1] * y[i] + kappa[2] * z[i][0])).exp());
            rng.random_bool(p) as u8
        })
        .collect();
    let fit = fit_logistic_kappa(&ind, &y, &z).unwrap();
    let cov = fit.info.clone().try_inverse().unwrap();
    for j in 0..3 {
        assert!((fit.coef[j] - kappa[j]).abs() < 4.0 * cov[(j, j)].sqrt(), "kappa[{j}] = {}", fit.coef[j]);
    }
}
