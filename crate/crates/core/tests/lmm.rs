mod common;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use sae_plugin::lmm::{self, Covariates, LmmParams, RemlProblem};
use sae_plugin::simulation::{self, ScenarioKind, ScenarioSpec, SyntheticDesign};
use sae_plugin::Error;

fn unbalanced() -> (sae_plugin::frame::LongFrame, DMatrix<f64>, Vec<f64>, Vec<usize>) {
    let data = [
        ("A", 0.3, 2.0),
        ("A", 1.1, 3.9),
        ("A", 2.0, 4.4),
        ("B", 0.5, 0.2),
        ("B", 1.4, 1.9),
        ("B", 2.2, 3.1),
        ("B", 3.0, 4.8),
        ("B", 3.9, 5.2),
        ("C", 0.9, 4.1),
        ("C", 2.7, 7.3),
        ("D", 1.0, 1.0),
        ("D", 1.9, 3.6),
        ("D", 3.3, 5.1),
        ("D", 4.0, 6.9),
    ];
    let rows: Vec<_> = data.iter().map(|(d, x, y)| (*d, 1, Some(*y), vec![*x], true)).collect();
    let frame = common::frame_from(&rows, &["x"]);
    let x = DMatrix::from_fn(data.len(), 2, |i, j| if j == 0 { 1.0 } else { data[i].1 });
    let y = data.iter().map(|r| r.2).collect();
    let groups = data.iter().map(|r| (r.0.as_bytes()[0] - b'A') as usize).collect();
    (frame, x, y, groups)
}

#[test]
fn reml_beats_every_point_of_a_log_grid() {
    let (frame, x, y, groups) = unbalanced();
    let fit = lmm::fit_reml(&frame, &Covariates::new(&["x"], true)).unwrap();
    let at_fit = common::dense_reml(&x, &y, &groups, fit.sigma2_u, fit.sigma2_e);
    let grid: Vec<f64> = (0..50).map(|i| 10f64.powf(-3.0 + 5.0 * i as f64 / 49.0)).collect();
    let best = grid
        .iter()
        .flat_map(|&u| grid.iter().map(move |&e| (u, e)))
        .map(|(u, e)| common::dense_reml(&x, &y, &groups, u, e))
        .fold(f64::NEG_INFINITY, f64::max);
    assert!(at_fit >= best - 1e-9, "fit {at_fit} < grid {best}");
}

#[test]
fn reml_loglik_matches_dense_up_to_a_constant() {
    let (_, x, y, groups) = unbalanced();
    let problem = RemlProblem::new(x.clone(), &groups).unwrap();
    let pts = [(0.5, 1.0), (2.0, 0.3), (0.01, 4.0)];
    let diffs: Vec<f64> = pts
        .iter()
        .map(|&(u, e)| problem.loglik_at(&y, u, e).unwrap() - common::dense_reml(&x, &y, &groups, u, e))
        .collect();
    for d in &diffs {
        assert!((d - diffs[0]).abs() < 1e-9, "{diffs:?}");
    }
}

#[test]
fn zero_between_domain_variance_gives_ols() {
    // Residual pattern sums to zero and is orthogonal to x within every
    // domain, so OLS residuals have zero domain means.
    let e = [1.0, -1.0, -1.0, 1.0];
    let rows: Vec<_> = (0..12)
        .map(|i| {
            let x = (i % 4 + 1) as f64;
            (["A", "B", "C"][i / 4], 1, Some(1.0 + 2.0 * x + e[i % 4]), vec![x], true)
        })
        .collect();
    let frame = common::frame_from(&rows, &["x"]);
    let fit = lmm::fit_reml(&frame, &Covariates::new(&["x"], true)).unwrap();
    assert!(fit.sigma2_u.abs() < 1e-8, "{}", fit.sigma2_u);
    assert!((fit.beta[0] - 1.0).abs() < 1e-8 && (fit.beta[1] - 2.0).abs() < 1e-8, "{:?}", fit.beta);
    // RSS / (n - p) = 12 / 10.
    assert!((fit.sigma2_e - 1.2).abs() < 1e-6, "{}", fit.sigma2_e);
    assert!(fit.v_hat.values().all(|v| v.abs() < 1e-8));
}

#[test]
fn blup_matches_dense_formula_on_unbalanced_data() {
    let (frame, x, y, groups) = unbalanced();
    let fit = lmm::fit_reml(&frame, &Covariates::new(&["x"], true)).unwrap();
    let dense = common::dense_blup(&x, &y, &groups, 4, &fit.beta, fit.sigma2_u, fit.sigma2_e);
    let got = lmm::blup_effects(&fit, &frame).unwrap();
    for (d, name) in ["A", "B", "C", "D"].iter().enumerate() {
        assert!((got[*name] - dense[d]).abs() < 1e-10);
    }
    let gls = common::dense_gls(&x, &y, &groups, fit.sigma2_u, fit.sigma2_e);
    assert!((gls - DVector::from_column_slice(&fit.beta)).amax() < 1e-8);
}

#[test]
fn fitted_unobserved_is_x_beta_plus_effect() {
    let rows = vec![
        ("A", 1, Some(2.0), vec![1.0], true),
        ("A", 1, Some(3.5), vec![2.0], true),
        ("A", 1, None, vec![3.0], false),
        ("B", 1, Some(1.0), vec![1.5], true),
        ("B", 1, Some(0.4), vec![0.5], true),
        ("B", 1, None, vec![2.5], false),
        ("C", 1, Some(5.0), vec![2.0], true),
        ("C", 1, Some(6.2), vec![3.0], true),
        ("D", 1, None, vec![4.0], false),
        ("D", 1, None, vec![1.0], false),
    ];
    let frame = common::frame_from(&rows, &["x"]);
    let fit = lmm::fit_reml(&frame, &Covariates::new(&["x"], true)).unwrap();
    let got = lmm::fitted_unobserved(&fit, &frame).unwrap();
    let nonsampled: Vec<_> = rows.iter().filter(|r| !r.4).collect();
    assert_eq!(got.len(), nonsampled.len());
    for (g, r) in got.iter().zip(&nonsampled) {
        let effect = fit.v_hat.get(r.0).copied().unwrap_or(0.0);
        let want = fit.beta[0] + fit.beta[1] * r.3[0] + effect;
        assert!((g - want).abs() < 1e-12);
    }
    assert!(!fit.v_hat.contains_key("D"));
}

#[test]
fn single_domain_is_not_identifiable() {
    let rows: Vec<_> = (0..5).map(|i| ("A", 1, Some(i as f64), vec![i as f64 * 0.3], true)).collect();
    let frame = common::frame_from(&rows, &["x"]);
    let err = lmm::fit_reml(&frame, &Covariates::new(&["x"], true)).unwrap_err();
    assert!(matches!(err, Error::Identifiability(_)), "{err:?}");
}

#[test]
fn simulated_populations_have_model_moments() {
    let rows: Vec<_> = (0..20).map(|i| (["A", "B", "C", "D", "E"][i / 4], 1, None, vec![1.0], false)).collect();
    let frame = common::frame_from(&rows, &["x"]);
    let params = LmmParams {
        beta: vec![3.0],
        sigma2_u: 4.0,
        sigma2_e: 1.0,
    };
    let cov = Covariates::new(&["x"], false);
    let k = 600;
    let draws: Vec<Vec<f64>> = (0..k)
        .map(|s| lmm::simulate_population(&params, &cov, &frame, s).unwrap())
        .collect();
    let mean = |i: usize| draws.iter().map(|d| d[i]).sum::<f64>() / k as f64;
    let cov_of = |i: usize, j: usize| {
        let (mi, mj) = (mean(i), mean(j));
        draws.iter().map(|d| (d[i] - mi) * (d[j] - mj)).sum::<f64>() / (k - 1) as f64
    };
    let var: f64 = (0..20).map(|i| cov_of(i, i)).sum::<f64>() / 20.0;
    let within: f64 = (0..5).map(|d| cov_of(4 * d, 4 * d + 1)).sum::<f64>() / 5.0;
    let across: f64 = (0..4).map(|d| cov_of(4 * d, 4 * d + 4)).sum::<f64>() / 4.0;
    let grand = (0..20).map(mean).sum::<f64>() / 20.0;
    assert!((var - 5.0).abs() < 0.6, "variance {var}");
    assert!((within - 4.0).abs() < 0.8, "within-domain covariance {within}");
    assert!(across.abs() < 0.8, "cross-domain covariance {across}");
    assert!((grand - 3.0).abs() < 0.3, "mean {grand}");
}

#[test]
fn calibration_recovers_generating_parameters() {
    let design = SyntheticDesign {
        n_domains: 60,
        units_per_domain: 20,
        ..SyntheticDesign::default()
    };
    let frame = simulation::synthetic_frame(&design, 5).unwrap();
    let truth = ScenarioSpec {
        kind: ScenarioKind::Lm,
        beta_pop: vec![0.05, 8.0, 40.0],
        sigma2_u_pop: 400.0,
        sigma2_e_pop: 2500.0,
        a: 1.0,
        columns: simulation::default_lmm_columns(),
    };
    let y = simulation::generate_scenario(&truth, &frame, 8).unwrap();
    let population = frame.with_responses(&y).unwrap();
    let got = simulation::calibrate_params(&population, ScenarioKind::Lm, &simulation::default_lmm_columns()).unwrap();
    assert!((got.sigma2_e_pop / 2500.0 - 1.0).abs() < 0.1, "{}", got.sigma2_e_pop);
    assert!((got.sigma2_u_pop / 400.0 - 1.0).abs() < 0.6, "{}", got.sigma2_u_pop);
    let fixed = |b: &[f64]| {
        simulation::scenario_design(ScenarioKind::Lm, &frame, &truth.columns).unwrap() * DVector::from_column_slice(b)
    };
    let gap = (fixed(&got.beta_pop) - fixed(&truth.beta_pop)).amax();
    assert!(gap < 15.0, "max fixed-part gap {gap}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn reml_fit_is_a_local_maximum(
        ys in proptest::collection::vec(-5.0f64..5.0, 14),
        du in -0.3f64..0.3,
        de in -0.3f64..0.3,
    ) {
        let (_, x, _, groups) = unbalanced();
        let problem = RemlProblem::new(x, &groups).unwrap();
        let est = problem.fit(&ys).unwrap();
        prop_assume!(est.converged && est.sigma2_e > 1e-6);
        let u = (est.sigma2_u * (1.0 + du)).max(0.0);
        let e = est.sigma2_e * (1.0 + de);
        let other = problem.loglik_at(&ys, u, e).unwrap();
        prop_assert!(est.loglik >= other - 1e-7, "{} < {}", est.loglik, other);
    }

    #[test]
    fn blup_shrinks_toward_zero(ys in proptest::collection::vec(-5.0f64..5.0, 14)) {
        let (frame, x, _, groups) = unbalanced();
        let rows: Vec<_> = frame
            .rows()
            .iter()
            .zip(&ys)
            .map(|(r, y)| (r.domain.as_str(), 1, Some(*y), r.x.clone(), true))
            .collect();
        let frame = common::frame_from(&rows, &["x"]);
        let fit = lmm::fit_reml(&frame, &Covariates::new(&["x"], true)).unwrap();
        let b = DVector::from_column_slice(&fit.beta);
        let resid = DVector::from_column_slice(&ys) - &x * b;
        for (d, name) in ["A", "B", "C", "D"].iter().enumerate() {
            let idx: Vec<usize> = (0..14).filter(|&i| groups[i] == d).collect();
            let m = idx.iter().map(|&i| resid[i]).sum::<f64>() / idx.len() as f64;
            let v = fit.v_hat[*name];
            prop_assert!(v.abs() <= m.abs() + 1e-9);
            prop_assert!(v * m >= -1e-12);
        }
    }
}
