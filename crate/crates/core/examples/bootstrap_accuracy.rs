//! Parametric and residual bootstrap RMSE and QAPE estimates for both
//! predictors of a domain mean.
//!
//! ```text
//! cargo run --release --example bootstrap_accuracy
//! ```

use sae_plugin::accuracy::{estimate_accuracy, AccuracyConfig, BootstrapPlan, Estimator};
use sae_plugin::frame::{load_frame, DomainFilter, Schema};
use sae_plugin::gbt::{GbFeatures, GbHyperparams};
use sae_plugin::lmm::Covariates;
use sae_plugin::predictor::{PredictorSpec, Statistic, ThetaSpec};

fn main() -> sae_plugin::Result<()> {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/data/toy_panel.csv");
    let frame = load_frame(path, &Schema::default())?;
    let covariates = Covariates::new(&["x1", "x4", "x7"], false);
    let predictors = [
        PredictorSpec::Lmm {
            covariates: covariates.clone(),
        },
        PredictorSpec::Gb {
            hyperparams: GbHyperparams::default(),
            features: GbFeatures::default(),
        },
    ];
    let thetas = [ThetaSpec::new(Statistic::Mean, DomainFilter::Id("D01".into()), frame.n_periods())];

    let plan = BootstrapPlan::new(&frame, &frame.sample_flags(), &covariates, &predictors, &thetas)?;
    let gen = plan.fit_generator(&frame.sampled_responses())?;
    let config = AccuracyConfig {
        b: 100,
        estimators: vec![Estimator::Param, Estimator::Rb, Estimator::RbCor],
        qape_orders: vec![0.5, 0.9],
        ..AccuracyConfig::default()
    };
    let est = estimate_accuracy(&plan, &gen, &config, 42)?;
    for c in &est.cells {
        let p = c.p.map(|p| format!("({p})")).unwrap_or_default();
        println!("{:<4} {:<14} {:<6} {:<5}{:<6} {:>8.2}", c.predictor.label(), c.theta.to_string(), c.estimator.name(), c.measure, p, c.value);
    }
    println!("redrawn replicates: {}", est.failures);
    Ok(())
}
