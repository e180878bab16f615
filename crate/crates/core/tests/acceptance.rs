//! Acceptance checks. Prints one `PASS` / `FAIL` line per criterion and
//! fails if any criterion fails.
//!
//! Criteria 6 to 8 run the desk-scale Monte Carlo studies (K = 200,
//! B = 200) and take several minutes on one core.

mod common;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sae_plugin::accuracy::{self, DbVariant, ErrorSample, Estimator, DEFAULT_Q_EF};
use sae_plugin::gbt::{self, GbHyperparams, Node, TreeParams};
use sae_plugin::lmm::{self, Covariates};
use sae_plugin::predictor::PredictorKind;
use sae_plugin::rng;
use sae_plugin::simulation::{self, McConfig, ScenarioGenerator, ScenarioKind, SyntheticDesign};

/// Master seed of the desk-scale studies.
const DESK_SEED: u64 = 20_241_019;

struct Outcome {
    pass: bool,
    detail: String,
}

fn check(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn run(n: usize, name: &str, limit: Option<Duration>, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let out = f();
    let took = start.elapsed();
    let in_time = limit.is_none_or(|l| took <= l);
    let pass = out.pass && in_time;
    // Written straight to stdout so the line shows up without --nocapture.
    let mut stdout = std::io::stdout().lock();
    writeln!(
        stdout,
        "criterion {n:>2} {} {name}: {}; {:.2}s{}",
        if pass { "PASS" } else { "FAIL" },
        out.detail,
        took.as_secs_f64(),
        if in_time { "" } else { " (over time limit)" }
    )
    .unwrap();
    pass
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn estimator_identities() -> Outcome {
    let tol = 1e-12;
    let q = DEFAULT_Q_EF;
    let mut bad = Vec::new();
    let mut expect = |name: &str, got: f64, want: f64| {
        if !close(got, want, tol) {
            bad.push(format!("{name}: {got} vs {want}"));
        }
    };

    // C = 1: classic and single-draw double bootstrap coincide.
    let s = ErrorSample::two_level(vec![1.0, 2.0, 3.0], vec![vec![0.5], vec![1.0], vec![2.0]]).unwrap();
    let hand = ((2.0 - 0.25) + (8.0 - 1.0) + (18.0 - 4.0)) / 3.0;
    expect("dbC(C=1)", accuracy::mse_db_c(&s).unwrap(), hand);
    expect("db1", accuracy::mse_db1(&s).unwrap(), hand);

    // Hall-Maiti: param >= two-level gives 2 param - two.
    let s = ErrorSample::two_level(vec![2.0, 2.0], vec![vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
    expect("dbCHM additive", accuracy::mse_db_chm(&s).unwrap(), 2.0 * 4.0 - 1.0);
    // param < two-level gives param exp((param - two) / two).
    let s = ErrorSample::two_level(vec![1.0, 1.0], vec![vec![2.0, 2.0], vec![2.0, 2.0]]).unwrap();
    expect("dbCHM multiplicative", accuracy::mse_db_chm(&s).unwrap(), (-0.75f64).exp());

    // Erciulescu-Fuller gate on mean(u**^2) / param at q = 0.77.
    let s = ErrorSample::two_level(vec![2.0, 2.0], vec![vec![1.0], vec![1.0]]).unwrap();
    expect("db1EF gated", accuracy::mse_db1_ef(&s, q).unwrap(), 0.77 * 4.0);
    let s = ErrorSample::two_level(vec![1.0, 1.0], vec![vec![1.0], vec![1.0]]).unwrap();
    expect("db1EF open", accuracy::mse_db1_ef(&s, q).unwrap(), 2.0 - 1.0);
    let s = ErrorSample::two_level(vec![2.0, 2.0, 2.0], vec![vec![1.0], vec![1.0]]).unwrap();
    expect("dbTelEF gated", accuracy::mse_db_tel_ef(&s, q).unwrap(), 4.0);
    let s = ErrorSample::two_level(vec![1.0, 2.0, 3.0], vec![vec![2.0], vec![2.0]]).unwrap();
    expect("dbTelEF open", accuracy::mse_db_tel_ef(&s, q).unwrap(), ((1.0 + 4.0 - 4.0) + (4.0 + 9.0 - 4.0)) / 2.0);

    // Modified errors fall back to u* when the corrected square is negative.
    let s = ErrorSample::two_level(vec![1.0, 3.0], vec![vec![2.0], vec![1.0]]).unwrap();
    let m = accuracy::modified_db_errors(&s, DbVariant::Db1).unwrap();
    expect("modified fallback", m[0], 1.0);
    expect("modified sqrt", m[1], 17f64.sqrt());
    expect("QAPE db1 p=0.99", accuracy::qape_db(&s, 0.99, DbVariant::Db1).unwrap(), 17f64.sqrt());

    check(bad.is_empty(), if bad.is_empty() { "11 identities within 1e-12".to_string() } else { bad.join("; ") })
}

fn reml_instance() -> (sae_plugin::frame::LongFrame, DMatrix<f64>, Vec<f64>, Vec<usize>) {
    let xs = [1.0, 2.0, 3.0, 4.0, 1.5, 2.5, 3.5, 4.5, 0.5, 2.0, 3.0, 5.0];
    let ys = [3.1, 4.9, 7.2, 9.0, 6.0, 7.4, 9.9, 11.2, 1.1, 4.6, 5.9, 10.3];
    let rows: Vec<_> = (0..12)
        .map(|i| (["A", "B", "C"][i / 4], 1, Some(ys[i]), vec![xs[i]], true))
        .collect();
    let frame = common::frame_from(&rows, &["x"]);
    let x = DMatrix::from_fn(12, 2, |i, j| if j == 0 { 1.0 } else { xs[i] });
    let groups = (0..12).map(|i| i / 4).collect();
    (frame, x, ys.to_vec(), groups)
}

fn reml_oracle() -> Outcome {
    let (frame, x, y, groups) = reml_instance();
    let fit = lmm::fit_reml(&frame, &Covariates::new(&["x"], true)).unwrap();
    let (s2u, s2e) = common::grid_argmax_2d(
        |u, e| common::dense_reml(&x, &y, &groups, u, e),
        [0.0, 1e-3],
        [20.0, 20.0],
        41,
        1e-6,
    );
    let beta = common::dense_gls(&x, &y, &groups, s2u, s2e);
    let diffs = [
        (fit.sigma2_u - s2u).abs(),
        (fit.sigma2_e - s2e).abs(),
        (fit.beta[0] - beta[0]).abs(),
        (fit.beta[1] - beta[1]).abs(),
    ];
    let worst = diffs.iter().cloned().fold(0.0, f64::max);
    check(
        fit.converged && worst <= 1e-4,
        format!(
            "fit (s2u {:.6}, s2e {:.6}) vs grid ({s2u:.6}, {s2e:.6}); max |diff| {worst:.2e} <= 1e-4",
            fit.sigma2_u, fit.sigma2_e
        ),
    )
}

fn blup_closed_form() -> Outcome {
    let (frame, x, y, groups) = reml_instance();
    let fit = lmm::fit_reml(&frame, &Covariates::new(&["x"], true)).unwrap();
    let blup = lmm::blup_effects(&fit, &frame).unwrap();
    let dense = common::dense_blup(&x, &y, &groups, 3, &fit.beta, fit.sigma2_u, fit.sigma2_e);
    let n = 4.0;
    let gamma = n * fit.sigma2_u / (n * fit.sigma2_u + fit.sigma2_e);
    let mut worst: f64 = 0.0;
    for (d, name) in ["A", "B", "C"].iter().enumerate() {
        let resid_mean = (0..12)
            .filter(|&i| groups[i] == d)
            .map(|i| y[i] - fit.beta[0] - fit.beta[1] * x[(i, 1)])
            .sum::<f64>()
            / n;
        let hand = gamma * resid_mean;
        worst = worst
            .max((blup[*name] - hand).abs())
            .max((dense[d] - hand).abs())
            .max((fit.v_hat[*name] - hand).abs());
    }
    check(worst <= 1e-10, format!("max |BLUP - shrinkage formula| {worst:.2e} <= 1e-10"))
}

fn cart_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut mismatches = Vec::new();
    for inst in 0..20 {
        let n = rng.random_range(4..=50);
        let p = rng.random_range(1..=4);
        let min_leaf = rng.random_range(1..=3);
        // Every other instance uses coarse integer features to exercise ties.
        let coarse = inst % 2 == 1;
        let x = DMatrix::from_fn(n, p, |_, _| {
            if coarse {
                rng.random_range(0..6) as f64
            } else {
                rng.random::<f64>() * 10.0
            }
        });
        let y: Vec<f64> = (0..n).map(|i| x[(i, 0)].sin() * 3.0 + rng.random::<f64>()).collect();
        let params = TreeParams {
            max_depth: Some(1),
            min_leaf,
            cols_per_split: p,
        };
        let rows: Vec<usize> = (0..n).collect();
        let tree = gbt::fit_tree(&x, &y, &rows, &params, &mut rng::stream(0, "cart", &[inst as u64])).unwrap();
        let got = match tree.nodes[0] {
            Node::Split { feature, threshold, .. } => Some((feature, threshold)),
            Node::Leaf { .. } => None,
        };
        let want = common::brute_force_split(&x, &y, min_leaf).map(|(f, t, _)| (f, t));
        if got != want {
            mismatches.push(format!("instance {inst}: {got:?} vs {want:?}"));
        }
    }
    check(
        mismatches.is_empty(),
        if mismatches.is_empty() { "20 of 20 root splits match exhaustive enumeration".into() } else { mismatches.join("; ") },
    )
}

fn gb_interpolation() -> Outcome {
    let n = 40;
    let mut r = ChaCha8Rng::seed_from_u64(9);
    let x = DMatrix::from_fn(n, 2, |i, j| if j == 0 { i as f64 * 0.37 } else { r.random::<f64>() });
    let y: Vec<f64> = (0..n).map(|_| r.random::<f64>() * 100.0 - 50.0).collect();
    let names = vec!["a".to_string(), "b".to_string()];
    let exact = GbHyperparams {
        eta: 1.0,
        n_rounds: 1,
        row_fraction: 1.0,
        col_fraction: 1.0,
        max_depth: None,
        min_leaf: 1,
    };
    let model = gbt::fit_gb(&x, &y, &names, &exact, 1).unwrap();
    let pred = gbt::predict_gb(&model, &x).unwrap();
    let interp = pred.iter().zip(&y).map(|(p, y)| (p - y).abs()).fold(0.0, f64::max);
    let zero = GbHyperparams { eta: 0.0, n_rounds: 5, ..exact };
    let model0 = gbt::fit_gb(&x, &y, &names, &zero, 1).unwrap();
    let pred0 = gbt::predict_gb(&model0, &x).unwrap();
    let all_zero = pred0.iter().all(|&v| v == 0.0);
    check(
        interp <= 1e-12 && all_zero,
        format!("max |f(x) - y| {interp:.2e} <= 1e-12; eta = 0 predictions all zero: {all_zero}"),
    )
}

fn desk() -> (sae_plugin::frame::LongFrame, Vec<simulation::ScenarioSpec>, McConfig) {
    let (frame, specs) =
        simulation::desk_setup(&SyntheticDesign::default(), &simulation::default_reference(), DESK_SEED).unwrap();
    let config = McConfig {
        seed: DESK_SEED,
        ..McConfig::default()
    };
    (frame, specs, config)
}

fn spec_of(specs: &[simulation::ScenarioSpec], kind: ScenarioKind) -> &simulation::ScenarioSpec {
    specs.iter().find(|s| s.kind == kind).unwrap()
}

fn row<'a>(
    study: &'a simulation::PredictorStudy,
    kind: PredictorKind,
    stat: &str,
) -> &'a simulation::Measures {
    &study
        .rows
        .iter()
        .find(|r| r.predictor == kind && r.theta.statistic.name() == stat)
        .unwrap()
        .measures
}

fn lm_directional() -> Outcome {
    let (frame, specs, config) = desk();
    assert_eq!((config.k, config.fraction, frame.n_domains(), frame.n_periods()), (200, 0.2, 10, 3));
    let study = simulation::mc_predictors(&config, spec_of(&specs, ScenarioKind::Lm), &frame).unwrap();
    let lmm = row(&study, PredictorKind::Lmm, "mean");
    let gb = row(&study, PredictorKind::Gb, "mean");
    check(
        lmm.rrmse <= gb.rrmse && lmm.rb.abs() <= 2.0,
        format!(
            "rRMSE LMM mean {:.3}% <= GB mean {:.3}%; |rB LMM mean| {:.3}% <= 2%",
            lmm.rrmse,
            gb.rrmse,
            lmm.rb.abs()
        ),
    )
}

fn nlm20_directional() -> Outcome {
    let (frame, specs, config) = desk();
    let study = simulation::mc_predictors(&config, spec_of(&specs, ScenarioKind::Nlm20), &frame).unwrap();
    let lmm = row(&study, PredictorKind::Lmm, "median");
    let gb = row(&study, PredictorKind::Gb, "median");
    check(
        gb.rmse <= lmm.rmse / 1.25,
        format!(
            "RMSE GB median {:.3} <= LMM median {:.3} / 1.25 (ratio {:.2})",
            gb.rmse,
            lmm.rmse,
            lmm.rmse / gb.rmse
        ),
    )
}

fn bootstrap_quality() -> Outcome {
    let (frame, specs, config) = desk();
    assert_eq!((config.b, config.c), (200, 1));
    let study = simulation::mc_accuracy_estimators(&config, spec_of(&specs, ScenarioKind::Lm), &frame).unwrap();
    let mut bad = Vec::new();
    let mut worst = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for r in &study.rows {
        if !matches!(r.estimator, Estimator::Param | Estimator::Rb | Estimator::RbCor) {
            continue;
        }
        let (rb_lim, rrmse_lim) = match (r.measure.as_str(), r.p) {
            ("rmse", None) => (20.0, 25.0),
            ("qape", Some(0.5)) => (30.0, 30.0),
            _ => continue,
        };
        if r.measure == "rmse" {
            worst.0 = worst.0.max(r.rb.abs());
            worst.1 = worst.1.max(r.rrmse);
        } else {
            worst.2 = worst.2.max(r.rb.abs());
            worst.3 = worst.3.max(r.rrmse);
        }
        if r.rb.abs() > rb_lim || r.rrmse > rrmse_lim {
            bad.push(format!(
                "{} {} {} {}: rB {:.1}% rRMSE {:.1}%",
                r.predictor.label(),
                r.theta,
                r.estimator,
                r.measure,
                r.rb,
                r.rrmse
            ));
        }
    }
    let summary = format!(
        "4 predictors x {{param, rb, rbCor}}: RMSE max |rB| {:.1}% (<= 20), max rRMSE {:.1}% (<= 25); \
         QAPE(0.5) max |rB| {:.1}% (<= 30), max rRMSE {:.1}% (<= 30); {} iteration redraws",
        worst.0, worst.1, worst.2, worst.3, study.failures
    );
    if bad.is_empty() {
        check(true, summary)
    } else {
        check(false, format!("{summary}; violations: {}", bad.join("; ")))
    }
}

fn divisor_property() -> Outcome {
    let (frame, specs, _) = desk();
    let nlm1 = spec_of(&specs, ScenarioKind::Nlm1);
    let nlm10 = nlm1.with_kind(ScenarioKind::Nlm10).unwrap();
    let g1 = ScenarioGenerator::new(nlm1, &frame).unwrap();
    let g10 = ScenarioGenerator::new(&nlm10, &frame).unwrap();
    let y1 = g1.draw(&mut rng::stream(3, "crn", &[]));
    let y10 = g10.draw(&mut rng::stream(3, "crn", &[]));
    let mut worst: f64 = 0.0;
    for i in 0..y1.len() {
        let d1 = y1[i] - g1.fixed()[i];
        let d10 = y10[i] - g10.fixed()[i];
        worst = worst.max((d10 - d1 / 10.0).abs() / g1.fixed()[i].abs().max(1.0));
    }
    let fixed_equal = g1.fixed() == g10.fixed();
    check(
        fixed_equal && worst <= 1e-12,
        format!("fixed parts identical: {fixed_equal}; max |dev10 - dev1/10| / max(1, |fixed|) {worst:.2e} <= 1e-12"),
    )
}

fn outputs(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect();
    files.sort();
    files
}

fn cli_reproducible() -> Outcome {
    let config = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("configs/toy.json");
    let tmp = tempfile::tempdir().unwrap();
    let mut bad = Vec::new();
    let mut n_files = 0;
    for cmd in ["fit", "predict", "accuracy", "simulate"] {
        let mut runs = Vec::new();
        for (tag, threads) in [("a", "1"), ("b", "1"), ("c", "4")] {
            let out = tmp.path().join(format!("{cmd}-{tag}"));
            let status = Command::new(env!("CARGO_BIN_EXE_saeplug"))
                .args([cmd, "--config"])
                .arg(&config)
                .args(["--threads", threads, "--out"])
                .arg(&out)
                .output()
                .unwrap();
            if !status.status.success() {
                bad.push(format!("{cmd} --threads {threads} exited with {}", status.status));
            }
            runs.push(outputs(&out));
        }
        n_files += runs[0].len();
        if runs[0].is_empty() || runs[0] != runs[1] || runs[0] != runs[2] {
            bad.push(format!("{cmd}: outputs differ between runs"));
        }
    }
    check(
        bad.is_empty(),
        if bad.is_empty() {
            format!("{n_files} files byte-identical across reruns and --threads 1 / 4")
        } else {
            bad.join("; ")
        },
    )
}

#[test]
fn acceptance_criteria() {
    let sec = Duration::from_secs;
    let results = [
        run(1, "estimator formula identities", Some(sec(1)), estimator_identities),
        run(2, "REML matches dense grid search", Some(sec(10)), reml_oracle),
        run(3, "BLUP closed form", Some(sec(1)), blup_closed_form),
        run(4, "CART split matches exhaustive enumeration", Some(sec(10)), cart_oracle),
        run(5, "GB interpolation and eta = 0", Some(sec(1)), gb_interpolation),
        run(6, "LM: LMM mean beats GB mean", None, lm_directional),
        run(7, "NLM20: GB median beats LMM median", None, nlm20_directional),
        run(8, "LM: bootstrap RMSE and QAPE(0.5) estimator quality", None, bootstrap_quality),
        run(9, "NLM10 deviations are NLM1 deviations / 10", Some(sec(1)), divisor_property),
        run(10, "CLI outputs reproducible at any thread count", None, cli_reproducible),
    ];
    let failed: Vec<usize> = results
        .iter()
        .enumerate()
        .filter(|(_, p)| !**p)
        .map(|(i, _)| i + 1)
        .collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
