//! Probes the loss variance under bounded noise around each landscape
//! minimum: the wide well is flatter than the narrow one.
//!
//! cargo run --example flatness

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mtcool::verify::{flatness_probe, LandscapeSpec};

fn main() -> mtcool::Result<()> {
    let spec = LandscapeSpec::flat_vs_sharp()?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for (min, depth) in spec.basin_minima()? {
        let r = flatness_probe(
            &mut |x| Ok(spec.value(x)),
            &min,
            &[0, 1],
            0.1,
            2000,
            &mut rng,
        )?;
        println!(
            "minimum {min:.3?} depth {depth:.4}: mean {:.4}, variance {:.3e}, max {:.4}",
            r.mean, r.variance, r.max
        );
    }
    Ok(())
}
