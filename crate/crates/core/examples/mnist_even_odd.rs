//! Trains MT-COOL on the even/odd MNIST split and reports test accuracy.
//! Expects the four IDX files in `dir` (see `mtcool fetch-mnist`).
//!
//! cargo run --release --example mnist_even_odd -- [dir] [train_subset] [outer_iters]

use std::path::PathBuf;

use mtcool::baselines::{train_method, Method};
use mtcool::coop::TrainConfig;
use mtcool::data::{load_mnist, split_even_odd, TaskData};
use mtcool::network::{MultiTaskModel, NetSpec};

fn main() -> mtcool::Result<()> {
    let mut args = std::env::args().skip(1);
    let dir = args
        .next()
        .map_or_else(|| PathBuf::from("data/mnist"), PathBuf::from);
    let subset = args
        .next()
        .map_or(10_000, |s| s.parse().expect("train subset"));
    let outer = args
        .next()
        .map_or(1500, |s| s.parse().expect("outer iterations"));

    let train = split_even_odd(&load_mnist(&dir, true)?.head(subset))?;
    let test = split_even_odd(&load_mnist(&dir, false)?)?;
    let batch = 64;
    let mut data = TaskData::new(train.tasks, batch, 0)?;
    let mut model = MultiTaskModel::build(&NetSpec::lenet(), 2, 0)?;
    let cfg = TrainConfig {
        warmup_iters: subset / 2 / batch,
        outer_iters: outer,
        eval_every: 500,
        track_negative_transfer: false,
        ..TrainConfig::default()
    };
    let start = std::time::Instant::now();
    let mut eval = |m: &MultiTaskModel| -> mtcool::Result<Vec<f64>> {
        (0..2)
            .map(|t| m.accuracy(&test.tasks[t].images, &test.tasks[t].labels, t))
            .collect()
    };
    let out = train_method(Method::MtCool, &mut model, &mut data, &cfg, Some(&mut eval))?;
    for r in out.records.iter().filter(|r| r.accuracy.is_some()) {
        let a = r.accuracy.as_ref().unwrap();
        println!(
            "iteration {:>5}: even {:.2}%, odd {:.2}%",
            r.iter + 1,
            100.0 * a[0],
            100.0 * a[1]
        );
    }
    println!("{:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}
