//! Random search over gradient-boosting hyperparameters, scored by 5-fold
//! cross-validation with folds grouped by unit.
//!
//! ```text
//! cargo run --release --example tune_gb
//! ```

use std::collections::BTreeMap;

use sae_plugin::frame::{load_frame, Schema};
use sae_plugin::gbt::{fit_gb, predict_gb, random_search, tune_cv, GbFeatures, SearchSpace};

fn main() -> sae_plugin::Result<()> {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/data/toy_panel.csv");
    let frame = load_frame(path, &Schema::default())?;
    let (x, names) = GbFeatures::default().matrix(&frame)?;
    let rows = frame.sampled_indices();
    let x_s = x.select_rows(&rows);
    let y_s = frame.sampled_responses();

    // One group per unit so a unit's periods never straddle train and test.
    let mut ids = BTreeMap::new();
    let groups: Vec<usize> = rows
        .iter()
        .map(|&i| {
            let next = ids.len();
            *ids.entry(frame.rows()[i].unit.clone()).or_insert(next)
        })
        .collect();

    let candidates = random_search(&SearchSpace::default(), 12, 1)?;
    let cv = tune_cv(&x_s, &y_s, &groups, &names, &candidates, 5, 2)?;
    for (c, s) in candidates.iter().zip(&cv.scores) {
        println!(
            "eta {:.3} rounds {:>3} depth {:?} min_leaf {} -> CV MSE {:.0}",
            c.eta, c.n_rounds, c.max_depth, c.min_leaf, s
        );
    }
    println!("best: candidate {} {:?}", cv.best_index, cv.best);

    let model = fit_gb(&x_s, &y_s, &names, &cv.best, 3)?;
    let fitted = predict_gb(&model, &x_s)?;
    let mse = fitted.iter().zip(&y_s).map(|(f, y)| (f - y).powi(2)).sum::<f64>() / y_s.len() as f64;
    println!("in-sample MSE of the refitted model: {mse:.0}");
    Ok(())
}
