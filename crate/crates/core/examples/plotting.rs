//! Runs a short landscape experiment and renders its SVG plots: loss
//! curves and the contour map with each trajectory.
//!
//! cargo run --release --example plotting -- [output]

use mtcool::harness::{plot, run_experiment, ExperimentConfig};

fn main() -> mtcool::Result<()> {
    let output = std::env::args()
        .nth(1)
        .map_or_else(|| std::env::temp_dir().join("mtcool-plots"), Into::into);
    let text = std::fs::read_to_string(concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/configs/landscape.toml"
    ))
    .unwrap();
    let mut cfg = ExperimentConfig::from_toml(&text)?;
    cfg.output = output;
    cfg.repeats = 3;
    run_experiment(&cfg, None)?;
    for f in plot::emit_plots(&cfg.output)? {
        println!("{}", f.display());
    }
    Ok(())
}
