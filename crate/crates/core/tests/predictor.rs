mod common;

use proptest::prelude::*;
use sae_plugin::frame::DomainFilter;
use sae_plugin::gbt::{GbFeatures, GbHyperparams};
use sae_plugin::lmm::Covariates;
use sae_plugin::predictor::{self, Layout, PredictorSpec, ResolvedTheta, Statistic, ThetaSpec};

fn specs() -> Vec<PredictorSpec> {
    vec![
        PredictorSpec::Lmm {
            covariates: Covariates::new(&["x"], true),
        },
        PredictorSpec::Gb {
            hyperparams: GbHyperparams {
                n_rounds: 20,
                ..GbHyperparams::default()
            },
            features: GbFeatures::default(),
        },
    ]
}

/// Two periods, three domains; domain C is fully sampled in period 2.
fn panel() -> sae_plugin::frame::LongFrame {
    let mut rows = Vec::new();
    for t in 1..=2u32 {
        for (d, dom) in ["A", "B", "C"].iter().enumerate() {
            for u in 0..6 {
                let x = 1.0 + u as f64 * 0.5 + d as f64;
                let y = 2.0 + 3.0 * x + d as f64 + t as f64 * 0.1 + ((u * 7 + d) % 5) as f64 * 0.3;
                let sampled = *dom == "C" || u % 2 == 0;
                rows.push((*dom, t, if sampled { Some(y) } else { None }, vec![x], sampled));
            }
        }
    }
    common::frame_from(&rows, &["x"])
}

#[test]
fn fully_sampled_target_is_the_sample_statistic() {
    let frame = panel();
    let observed: Vec<f64> = frame
        .rows()
        .iter()
        .filter(|r| r.domain == "C" && r.period == 2)
        .map(|r| r.y.unwrap())
        .collect();
    for stat in [Statistic::Mean, Statistic::Median, Statistic::Quantile(0.3), Statistic::Total] {
        let theta = ThetaSpec::new(stat, DomainFilter::Id("C".into()), 2);
        let want = stat.evaluate(&observed).unwrap();
        for spec in specs() {
            let model = spec.fit(&frame, 3).unwrap();
            let got = predictor::plug_in_predict(&model, &frame, &theta).unwrap();
            assert_eq!(got, want, "{:?} {stat:?}", spec.kind());
        }
    }
}

#[test]
fn prepared_predictor_matches_direct_plug_in() {
    let frame = panel();
    let layout = Layout::from_flags(&frame.sample_flags());
    let thetas = vec![
        ThetaSpec::new(Statistic::Mean, DomainFilter::Id("A".into()), 2),
        ThetaSpec::new(Statistic::Median, DomainFilter::All, 1),
    ];
    let resolved = ResolvedTheta::resolve(&thetas, &frame).unwrap();
    let y_s = frame.sampled_responses();
    for spec in specs() {
        let prepared = predictor::PreparedPredictor::new(&spec, &frame, &layout).unwrap();
        let fast = prepared.predict(&layout, &y_s, &resolved, 9).unwrap();
        let model = spec.fit(&frame, 9).unwrap();
        let slow: Vec<f64> = thetas
            .iter()
            .map(|t| predictor::plug_in_predict(&model, &frame, t).unwrap())
            .collect();
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0), "{:?}: {a} vs {b}", spec.kind());
        }
    }
}

#[test]
fn lmm_mean_in_a_domain_uses_blup() {
    let frame = panel();
    let spec = &specs()[0];
    let model = spec.fit(&frame, 0).unwrap();
    let sae_plugin::predictor::FittedModel::Lmm(fit) = &model else {
        panic!("expected LMM")
    };
    let theta = ThetaSpec::new(Statistic::Mean, DomainFilter::Id("A".into()), 1);
    let rows: Vec<_> = frame.rows().iter().filter(|r| r.domain == "A" && r.period == 1).collect();
    let hand: f64 = rows
        .iter()
        .map(|r| r.y.unwrap_or(fit.beta[0] + fit.beta[1] * r.x[0] + fit.v_hat["A"]))
        .sum::<f64>()
        / rows.len() as f64;
    let got = predictor::plug_in_predict(&model, &frame, &theta).unwrap();
    assert!((got - hand).abs() < 1e-10);
}

proptest! {
    #[test]
    fn quantile_is_lower_order_statistic(
        values in proptest::collection::vec(-1e3f64..1e3, 1..60),
        p in 0.001f64..0.999,
    ) {
        prop_assert_eq!(Statistic::Quantile(p).evaluate(&values).unwrap(), common::lower_quantile(&values, p));
        prop_assert_eq!(Statistic::Median.evaluate(&values).unwrap(), common::lower_quantile(&values, 0.5));
    }

    #[test]
    fn layout_compose_round_trips(flags in proptest::collection::vec(any::<bool>(), 1..50)) {
        let layout = Layout::from_flags(&flags);
        let y: Vec<f64> = (0..flags.len()).map(|i| i as f64).collect();
        let sampled = layout.take_sampled(&y);
        prop_assert_eq!(sampled.len(), flags.iter().filter(|f| **f).count());
        let fitted: Vec<f64> = layout.nonsampled.iter().map(|&i| y[i]).collect();
        prop_assert_eq!(layout.compose(&sampled, &fitted), y);
    }

    #[test]
    fn observed_values_pass_through(seed in 0u64..1000) {
        // Whatever the fitted values, sampled entries of the composed vector
        // are the observed responses.
        let frame = panel();
        let fitted: Vec<f64> = (0..frame.n_rows() - frame.n_sampled()).map(|i| (seed + i as u64) as f64).collect();
        let c = predictor::compose_population(&frame, &fitted).unwrap();
        for (r, v) in frame.rows().iter().zip(&c.values) {
            if r.in_sample {
                prop_assert_eq!(Some(*v), r.y);
            }
        }
    }
}
