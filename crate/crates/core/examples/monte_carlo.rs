//! Monte Carlo comparison of the LMM and GB plug-in predictors under the
//! four simulation scenarios on a synthetic frame.
//!
//! ```text
//! cargo run --release --example monte_carlo -- [K]
//! ```

use sae_plugin::simulation::{default_reference, desk_setup, mc_predictors, McConfig, SyntheticDesign};

fn main() -> sae_plugin::Result<()> {
    let k = std::env::args().nth(1).map(|s| s.parse().expect("K must be an integer")).unwrap_or(50);
    let (frame, scenarios) = desk_setup(&SyntheticDesign::default(), &default_reference(), 1)?;
    let config = McConfig {
        k,
        seed: 1,
        ..McConfig::default()
    };
    println!("{:<6} {:<18} {:>8} {:>8} {:>9}", "", "predictor", "rB %", "rRMSE %", "RMSE");
    for spec in &scenarios {
        let study = mc_predictors(&config, spec, &frame)?;
        for r in &study.rows {
            let m = &r.measures;
            println!(
                "{:<6} {:<18} {:>8.2} {:>8.2} {:>9.2}",
                spec.kind.name(),
                format!("{} {}", r.predictor.label(), r.theta.statistic.name()),
                m.rb,
                m.rrmse,
                m.rmse
            );
        }
    }
    Ok(())
}
