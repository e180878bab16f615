//! Double-bootstrap MSE estimators and their bias-corrected variants from a
//! single two-level run.
//!
//! ```text
//! cargo run --release --example double_bootstrap
//! ```

use sae_plugin::accuracy::{self, DbVariant, DEFAULT_Q_EF};
use sae_plugin::frame::{load_frame, DomainFilter, Schema};
use sae_plugin::lmm::{fit_reml, Covariates};
use sae_plugin::predictor::{PredictorSpec, Statistic, ThetaSpec};

fn main() -> sae_plugin::Result<()> {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/data/toy_panel.csv");
    let frame = load_frame(path, &Schema::default())?;
    let covariates = Covariates::new(&["x1", "x4", "x7"], false);
    let fit = fit_reml(&frame, &covariates)?;
    let predictors = [PredictorSpec::Lmm { covariates }];
    let thetas = [ThetaSpec::new(Statistic::Median, DomainFilter::Id("D02".into()), frame.n_periods())];

    // C = 1 with an extra first-level replicate, so every variant applies.
    let run = accuracy::double_bootstrap(&fit, &frame, &predictors, &thetas, 100, 1, 9, true)?;
    let s = &run.samples[0][0];
    let rows = [
        ("param", accuracy::mse_param(s)),
        ("db1", accuracy::mse_db1(s)?),
        ("dbTel", accuracy::mse_db_tel(s)?),
        ("db1HM", accuracy::mse_db_chm(s)?),
        ("db1EF", accuracy::mse_db1_ef(s, DEFAULT_Q_EF)?),
        ("dbTelEF", accuracy::mse_db_tel_ef(s, DEFAULT_Q_EF)?),
    ];
    for (name, mse) in rows {
        println!("{name:<8} MSE {mse:>10.1}  RMSE {:>7.2}", mse.max(0.0).sqrt());
    }
    for v in [DbVariant::Db1, DbVariant::DbTel] {
        println!("QAPE(0.5) {v:?}: {:.2}", accuracy::qape_db(s, 0.5, v)?);
    }
    Ok(())
}
