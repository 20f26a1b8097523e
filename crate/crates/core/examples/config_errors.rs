//! Loads a shipped config, then shows how bad keys and values are
//! reported with their full key path.
//!
//! cargo run --example config_errors

use mtcool::harness::ExperimentConfig;

fn main() {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/configs/landscape.toml");
    let cfg = ExperimentConfig::load(path.as_ref()).expect("shipped config");
    println!(
        "{} methods, {} repeats, b = {}",
        cfg.methods.len(),
        cfg.repeats,
        cfg.train.bound
    );

    let text = std::fs::read_to_string(path).unwrap();
    for (what, broken) in [
        ("negative bound", text.replace("b = 0.5", "b = -0.5")),
        ("misspelled key", text.replace("b = 0.5", "bound = 0.5")),
        (
            "wrong type",
            text.replace("repeats = 10", "repeats = \"ten\""),
        ),
        ("unknown method", text.replace("\"vanilla\"", "\"adam\"")),
        ("unknown preset", text.replace("flat_vs_sharp", "bumpy")),
    ] {
        println!(
            "{what}: {}",
            ExperimentConfig::from_toml(&broken).unwrap_err()
        );
    }
}
