//! Flat-versus-sharp landscape: the grid oracle picks the flat basin, and
//! MT-COOL started in the sharp well ends there while Vanilla stays put.
//!
//! cargo run --release --example landscape

use mtcool::baselines::Method;
use mtcool::coop::TrainConfig;
use mtcool::harness::train_landscape;
use mtcool::verify::{grid_oracle, LandscapeSpec};

fn main() -> mtcool::Result<()> {
    let spec = LandscapeSpec::flat_vs_sharp()?;
    let oracle = grid_oracle(&spec, spec.resolution)?;
    println!("raw minima (equal depth): {:?}", oracle.raw_argmin_set);
    println!("smoothed-objective argmin: {:?}", oracle.argmin);

    let cfg = TrainConfig {
        bound: spec.bound,
        warmup_lr: 0.01,
        inner_lr: 0.01,
        kl_weight: 0.0,
        warmup_iters: 200,
        outer_iters: 1000,
        eval_every: 0,
        ..TrainConfig::default()
    };
    for seed in 0..5 {
        let start = spec.sharp_start(seed);
        let run = |m| {
            train_landscape(
                &spec,
                m,
                &start,
                &TrainConfig {
                    seed,
                    ..cfg.clone()
                },
            )
        };
        let (cool, _) = run(Method::MtCool)?;
        let (vanilla, _) = run(Method::Vanilla)?;
        println!(
            "seed {seed}: start ({:.3}, {:.3}) -> MT-COOL ({:.3}, {:.3}), Vanilla ({:.3}, {:.3})",
            start[0], start[1], cool[0], cool[1], vanilla[0], vanilla[1]
        );
    }
    Ok(())
}
