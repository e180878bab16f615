//! Fit the random-intercept model by REML on the bundled toy panel and print
//! the estimates and domain BLUPs.
//!
//! ```text
//! cargo run --example fit_lmm
//! ```

use sae_plugin::frame::{load_frame, Schema};
use sae_plugin::lmm::{fit_reml, Covariates};

fn main() -> sae_plugin::Result<()> {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/data/toy_panel.csv");
    let frame = load_frame(path, &Schema::default())?;
    println!("{} rows, {} sampled, {} domains", frame.n_rows(), frame.n_sampled(), frame.n_domains());

    let fit = fit_reml(&frame, &Covariates::new(&["x1", "x4", "x7"], false))?;
    for (name, b) in fit.beta_names.iter().zip(&fit.beta) {
        println!("beta[{name}] = {b:.5}");
    }
    println!("sigma2_u = {:.2}", fit.sigma2_u);
    println!("sigma2_e = {:.2}", fit.sigma2_e);
    println!("REML log-likelihood {:.4} after {} iterations", fit.reml_loglik, fit.iterations);
    for (domain, v) in &fit.v_hat {
        println!("  v[{domain}] = {v:+.2}");
    }
    Ok(())
}
