//! Generate a synthetic panel population, draw a panel sample and write both
//! as CSV.
//!
//! ```text
//! cargo run --example synthetic_panel -- OUT_DIR [SEED]
//! ```
//!
//! Writes `OUT_DIR/toy_population.csv` (responses on every row) and
//! `OUT_DIR/toy_panel.csv` (responses only on sampled rows).

use std::fs::File;
use std::path::PathBuf;

use sae_plugin::frame::{panel_sample_flags, UnitRecord};
use sae_plugin::rng::derive_seed;
use sae_plugin::simulation::{default_reference, reference_population, synthetic_frame, SyntheticDesign};

fn main() -> sae_plugin::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| ".".into()));
    let seed: u64 = args.next().map(|s| s.parse().expect("SEED must be an integer")).unwrap_or(2024);

    let design = SyntheticDesign {
        n_domains: 8,
        units_per_domain: 10,
        ..SyntheticDesign::default()
    };
    let frame = synthetic_frame(&design, derive_seed(seed, "frame", &[]))?;
    let population = reference_population(&frame, &default_reference(), derive_seed(seed, "population", &[]))?;
    let flags = panel_sample_flags(&population, 0.3, derive_seed(seed, "sample", &[]))?;
    let population = population.with_sample_flags(&flags)?;

    let rows: Vec<UnitRecord> = population
        .rows()
        .iter()
        .map(|r| UnitRecord {
            y: if r.in_sample { r.y } else { None },
            ..r.clone()
        })
        .collect();
    let sample = sae_plugin::frame::LongFrame::new(population.aux_names().to_vec(), rows)?;

    std::fs::create_dir_all(&out).map_err(|e| sae_plugin::Error::io(&out, e))?;
    for (name, f) in [("toy_population.csv", &population), ("toy_panel.csv", &sample)] {
        let path = out.join(name);
        f.write_csv(File::create(&path).map_err(|e| sae_plugin::Error::io(&path, e))?)?;
        println!(
            "{}: {} rows, {} sampled, {} periods",
            path.display(),
            f.n_rows(),
            f.n_sampled(),
            f.n_periods()
        );
    }
    Ok(())
}
