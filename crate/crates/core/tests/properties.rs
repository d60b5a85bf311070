mod common;

use cencov::closed_forms::{censored_marginal_loglik, clamp_probability, logistic, psi_closed, PROB_CEIL, PROB_FLOOR};
use cencov::inference::wald_intervals;
use cencov::model::score_full;
use cencov::numerics::{gauss_hermite, log_normal_upper_tail, normal_upper_tail, solve_estimating_equation, SolverConfig};
use cencov::simulation::{generate_dataset, summarize_coefficient};
use cencov::{
    fit_estimator, CensoredObservation, Dataset, EstimatorKind, EstimatorSpec, FitOptions, GaussianConditional, MeanSpec,
    NuisanceConfig, Theta,
};
use proptest::prelude::*;

fn small() -> ProptestConfig {
    ProptestConfig { cases: 64, ..ProptestConfig::default() }
}

fn linear_x_theta() -> impl Strategy<Value = Theta> {
    (prop::collection::vec(-3.0..3.0f64, 3), 0.3..2.5f64).prop_map(|(b, s)| Theta::new(b, s).unwrap())
}

fn cc_fit(records: &[CensoredObservation]) -> Vec<f64> {
    let ds = Dataset::censored(records, MeanSpec::LinearX).unwrap();
    let cfg = NuisanceConfig::Known { bundle: Default::default() };
    let opts = FitOptions { solver: SolverConfig { tol: 1e-12, ..Default::default() }, ..Default::default() };
    fit_estimator(EstimatorSpec::new(EstimatorKind::Cc), &ds, &cfg, &opts).unwrap().theta_hat.to_vec()
}

fn records(seed: u64) -> Vec<CensoredObservation> {
    let mut s = common::load("bartlett");
    s.n = 150;
    s.master_seed = seed;
    generate_dataset(&s, 0).unwrap().records
}

proptest! {
    #![proptest_config(small())]

    #[test]
    fn psi_closed_equals_hermite_average(
        theta in linear_x_theta(),
        y in -6.0..6.0f64,
        z in -2.0..2.0f64,
        mu in -1.5..1.5f64,
        sd in 0.3..2.0f64,
    ) {
        let law = GaussianConditional::new(mu, vec![0.0], sd).unwrap();
        let got = psi_closed(&theta, y, &[z], &law, MeanSpec::LinearX).unwrap();
        // X | Y, Z is normal; average -S over it with an 80-node rule.
        let b = &theta.beta;
        let s2 = theta.sigma * theta.sigma;
        let prec = b[1] * b[1] / s2 + 1.0 / (sd * sd);
        let m = ((y - b[0] - b[2] * z) * b[1] / s2 + mu / (sd * sd)) / prec;
        let rule = gauss_hermite(80);
        let mut want = [0.0; 4];
        for (t, w) in rule.nodes.iter().zip(&rule.weights) {
            let x = m + (2.0 / prec).sqrt() * t;
            let s = score_full(&theta, y, x, &[z], MeanSpec::LinearX).unwrap();
            for j in 0..4 {
                want[j] -= w * s[j] / std::f64::consts::PI.sqrt();
            }
        }
        for j in 0..4 {
            prop_assert!((got[j] - want[j]).abs() <= 1e-9 * (1.0 + want[j].abs()), "{j}: {} vs {}", got[j], want[j]);
        }
    }

    #[test]
    fn censored_loglik_is_nonincreasing_in_threshold(
        theta in linear_x_theta(),
        y in -4.0..4.0f64,
        w in -3.0..3.0f64,
        dw in 0.01..2.0f64,
    ) {
        let law = GaussianConditional::new(0.0, vec![0.3], 1.0).unwrap();
        let lo = censored_marginal_loglik(&theta, y, w, &[0.5], &law, MeanSpec::LinearX).unwrap();
        let hi = censored_marginal_loglik(&theta, y, w + dw, &[0.5], &law, MeanSpec::LinearX).unwrap();
        prop_assert!(hi <= lo, "{hi} > {lo}");
    }

    #[test]
    fn normal_tails_are_complementary(t in -8.0..8.0f64) {
        prop_assert!((normal_upper_tail(t) + normal_upper_tail(-t) - 1.0).abs() < 1e-15);
        prop_assert!((log_normal_upper_tail(t) - normal_upper_tail(t).ln()).abs() < 1e-12);
    }

    #[test]
    fn logistic_is_symmetric_and_clamps_stay_inside(eta in -800.0..800.0f64) {
        prop_assert!((logistic(-eta) - (1.0 - logistic(eta))).abs() < 1e-15);
        let p = clamp_probability(logistic(eta), None);
        prop_assert!((PROB_FLOOR..=PROB_CEIL).contains(&p));
    }

    #[test]
    fn wald_intervals_are_centred(est in -10.0..10.0f64, se in 1e-6..5.0f64) {
        let iv = wald_intervals(&[est], &[se], 0.95).unwrap()[0];
        prop_assert!(((iv.lower + iv.upper) / 2.0 - est).abs() < 1e-9 * (1.0 + est.abs()));
        prop_assert!(((iv.upper - iv.lower) / (2.0 * se) - 1.959_963_984_540_054).abs() < 1e-9);
    }

    #[test]
    fn newton_solves_linear_systems(
        diag in prop::collection::vec(1.0..5.0f64, 3),
        off in prop::collection::vec(-0.3..0.3f64, 3),
        rhs in prop::collection::vec(-5.0..5.0f64, 3),
    ) {
        let a = [[diag[0], off[0], off[1]], [off[0], diag[1], off[2]], [off[1], off[2], diag[2]]];
        let f = |x: &[f64]| -> cencov::Result<Vec<f64>> {
            Ok((0..3).map(|i| (0..3).map(|j| a[i][j] * x[j]).sum::<f64>() - rhs[i]).collect())
        };
        let out = solve_estimating_equation(f, &[0.0; 3], &[], &SolverConfig::default()).unwrap();
        let r = f(&out.x).unwrap();
        prop_assert!(r.iter().all(|v| v.abs() < 1e-8));
    }

    #[test]
    fn summary_is_translation_invariant(
        est in prop::collection::vec(-3.0..3.0f64, 2..40),
        shift in -5.0..5.0f64,
    ) {
        let fits: Vec<(f64, f64, f64)> = est.iter().map(|&e| (e, 0.5, 0.4)).collect();
        let moved: Vec<(f64, f64, f64)> = est.iter().map(|&e| (e + shift, 0.5, 0.4)).collect();
        let a = summarize_coefficient("E", "c", 0.2, &fits);
        let b = summarize_coefficient("E", "c", 0.2 + shift, &moved);
        prop_assert!((a.bias - b.bias).abs() < 1e-9);
        prop_assert!((a.sd_x100.unwrap() - b.sd_x100.unwrap()).abs() < 1e-7);
        prop_assert_eq!(a.coverage, b.coverage);
        prop_assert!((0.0..=100.0).contains(&a.coverage));
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 16, ..ProptestConfig::default() })]

    #[test]
    fn complete_case_fit_is_affine_equivariant(seed in 0u64..1000, shift in -3.0..3.0f64, scale in 0.2..5.0f64) {
        let base = records(seed);
        let base_fit = cc_fit(&base);
        let moved: Vec<CensoredObservation> = base
            .iter()
            .map(|r| CensoredObservation { y: scale * r.y + shift, ..r.clone() })
            .collect();
        let fit = cc_fit(&moved);
        let want = [scale * base_fit[0] + shift, scale * base_fit[1], scale * base_fit[2], scale * base_fit[3]];
        for j in 0..4 {
            prop_assert!((fit[j] - want[j]).abs() < 1e-7 * (1.0 + want[j].abs()), "{j}: {} vs {}", fit[j], want[j]);
        }
    }

    #[test]
    fn datasets_depend_only_on_seed_and_replication(seed in 0u64..10_000, rep in 0u64..50) {
        let mut s = common::load("ind_known");
        s.n = 50;
        s.master_seed = seed;
        let a = generate_dataset(&s, rep).unwrap();
        let b = generate_dataset(&s, rep).unwrap();
        let c = generate_dataset(&s, rep + 1).unwrap();
        prop_assert_eq!(&a.records, &b.records);
        prop_assert_ne!(&a.records, &c.records);
        for (r, x) in a.records.iter().zip(&a.x_true) {
            prop_assert_eq!(r.delta == 1, r.w == *x);
            prop_assert!(r.w <= *x);
        }
    }
}
