//! Runs the randomized gradient oracle suite over every op and composite
//! loss and prints each case.
//!
//! cargo run --release --example gradient_check -- [seed] [cases]

use mtcool::verify::gradient_check_suite;

fn main() -> mtcool::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed = args.next().map_or(0, |s| s.parse().expect("seed"));
    let count = args.next().map_or(100, |s| s.parse().expect("case count"));
    let cases = gradient_check_suite(seed, count)?;
    for c in &cases {
        println!(
            "{:<40} params {:>4}  rel error {:.2e}",
            c.name, c.params, c.rel_error
        );
    }
    let passed = cases.iter().filter(|c| c.rel_error < 1e-5).count();
    println!("{passed}/{} below 1e-5", cases.len());
    Ok(())
}
