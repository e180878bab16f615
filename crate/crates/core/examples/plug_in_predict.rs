//! Plug-in prediction of domain means, medians and a quantile with both
//! model kinds.
//!
//! ```text
//! cargo run --release --example plug_in_predict
//! ```

use sae_plugin::frame::{load_frame, DomainFilter, Schema};
use sae_plugin::gbt::{GbFeatures, GbHyperparams};
use sae_plugin::lmm::Covariates;
use sae_plugin::predictor::{plug_in_predict, PredictorSpec, Statistic, ThetaSpec};

fn main() -> sae_plugin::Result<()> {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/data/toy_panel.csv");
    let frame = load_frame(path, &Schema::default())?;
    let last = frame.n_periods();

    let specs = [
        PredictorSpec::Lmm {
            covariates: Covariates::new(&["x1", "x4", "x7"], false),
        },
        PredictorSpec::Gb {
            hyperparams: GbHyperparams::default(),
            features: GbFeatures::default(),
        },
    ];
    let mut targets: Vec<ThetaSpec> = frame
        .domains()
        .iter()
        .take(3)
        .flat_map(|d| {
            [Statistic::Mean, Statistic::Median]
                .map(|s| ThetaSpec::new(s, DomainFilter::Id(d.clone()), last))
        })
        .collect();
    targets.push(ThetaSpec::new(Statistic::Quantile(0.9), DomainFilter::All, last));

    for spec in &specs {
        let model = spec.fit(&frame, 7)?;
        for t in &targets {
            println!("{:<4} {:<22} {:>10.2}", spec.kind().label(), t.to_string(), plug_in_predict(&model, &frame, t)?);
        }
    }
    Ok(())
}
